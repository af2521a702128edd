"""Optimistic model-based agents: single-task UCB-Q and the two-stage transfer learner.

The inner maximisation over a Frobenius confidence ball is done in closed form:
for a ball of squared radius ``beta`` on the pair ``(L, S)`` the largest value of
``phi^T (dL + dS) w`` is ``sqrt(2 beta) ||phi||_2 ||w||_2``, attained at the rank-one
direction ``phi w^T`` split evenly between the two slots.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .estimation import (EstimatorState, GramStats, LrsConstraints, SolverOptions,
                         _min_eig, solve_low_rank_sparse, solve_sparse_difference)
from .generate import TaskPair
from .mdp import (CompositeMdp, RegularityConstants, compute_regularity, regression_rows,
                  sample_episodes)
from .oracle import RegretTrace, ValueTables, evaluate_policy, solve_optimal, uniform_policy

# smallest value on a 1/2/3/4/5/8 grid giving >= 95% good-event coverage on the
# reference battery (6 states, 3 actions, H=5, r=2, s=6, seeds 0-9, N=300)
DEFAULT_C_BETA = 5.0
VARIANTS = ("single", "transfer-naive", "transfer-tight")
TRACE_COLUMNS = ("episode", "cumulative_regret", "per_episode_regret", "est_err_L",
                 "est_err_S", "est_err_D", "beta", "bonus_mean", "in_region",
                 "lambda_min_design", "solver_iters")


# --- confidence radii -------------------------------------------------------------

def _complexity(r, s, consts: RegularityConstants):
    return r * (consts.c_phi * consts.c_psi_prime) ** 2 + s * consts.c_phipsi ** 2


def beta_single(n, H, d, N, r, s, consts: RegularityConstants, c_beta=DEFAULT_C_BETA):
    """Squared radius of the single-task confidence ball after ``n`` episodes."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return c_beta * H * math.log(d * N * H) * _complexity(r, s, consts) / n


def beta_initial(N0, H, d, r, s0, consts: RegularityConstants, c_beta=DEFAULT_C_BETA):
    """Pilot radius after ``N0`` source episodes."""
    return beta_single(N0, H, d, N0, r, s0, consts, c_beta)


def beta_transfer(n, beta_n0, e, H, d, N, consts: RegularityConstants, c_beta_diff=1.0):
    """Online radius for the difference: ``beta_N0 + c e C_phipsi^2 H log(dNH) / n``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return beta_n0 + c_beta_diff * e * consts.c_phipsi ** 2 * H * math.log(d * N * H) / n


@dataclass(frozen=True)
class ConfidenceSpec:
    variant: str = "single"
    c_beta: float = DEFAULT_C_BETA
    delta: float = 1.0
    beta_n: float = 0.0
    beta_n0: float = 0.0
    beta_n1: float = 0.0
    e: int = 0
    exact_top: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if min(self.beta_n, self.beta_n0, self.beta_n1) < 0:
            raise ValueError("radii must be nonnegative")

    @property
    def radius(self):
        """Squared radius of the joint ball used by the single/naive bonus."""
        return self.beta_n if self.variant == "single" else self.beta_n1


# --- optimistic backup ---------------------------------------------------------------

@dataclass
class OptimisticValues:
    q_table: np.ndarray      # (H, S, A)
    v_table: np.ndarray      # (H + 1, S), clipped to [0, H]
    bonus_core: np.ndarray   # (H, S, A)
    bonus_diff: np.ndarray   # (H, S, A)
    w_norm: np.ndarray | None = None   # (H,) norms of Psi^T v_{h+1}

    @property
    def bonus(self):
        return self.bonus_core + self.bonus_diff

    @property
    def policy(self):
        return np.argmax(self.q_table, axis=2)


def top_k_frobenius(phi_rows, w, k):
    """Per row ``x`` of ``phi_rows``: Frobenius norm of the ``k`` largest entries of ``|x w^T|``."""
    outer = np.abs(phi_rows)[:, :, None] * np.abs(w)[None, None, :]
    flat = np.sort(outer.reshape(len(phi_rows), -1) ** 2, axis=1)[:, ::-1]
    return np.sqrt(flat[:, :k].sum(axis=1))


def optimistic_backup(core_hat, spec: ConfidenceSpec, features, reward, horizon,
                      n_actions) -> OptimisticValues:
    """Backward induction with closed-form optimism bonuses.

    ``core_hat`` is the full target estimate (``L + S`` or ``L + S0 + D``) and
    ``reward`` is the flat (S*A,) reward vector.
    """
    phi, psi = features.phi, features.psi
    ns = psi.shape[0]
    H = horizon
    p_hat = phi @ core_hat @ psi.T                # (SA, S) estimated kernel
    phi_l2 = np.linalg.norm(phi, axis=1)
    phi_inf = np.abs(phi).max(axis=1)
    q = np.zeros((H, ns * n_actions))
    b_core = np.zeros_like(q)
    b_diff = np.zeros_like(q)
    v = np.zeros((H + 1, ns))
    w_norms = np.zeros(H)
    for h in range(H - 1, -1, -1):
        w = psi.T @ v[h + 1]
        w_norm = w_norms[h] = float(np.linalg.norm(w))
        if spec.variant == "transfer-tight":
            b_core[h] = math.sqrt(2 * spec.beta_n0) * phi_l2 * w_norm
            if spec.exact_top:
                b_diff[h] = math.sqrt(spec.beta_n1) * top_k_frobenius(phi, w, 2 * spec.e)
            else:
                b_diff[h] = math.sqrt(4 * spec.e * spec.beta_n1) * phi_inf * w_norm
        else:
            b_core[h] = math.sqrt(2 * spec.radius) * phi_l2 * w_norm
        q[h] = reward + p_hat @ v[h + 1] + b_core[h] + b_diff[h]
        v[h] = np.clip(q[h].reshape(ns, n_actions).max(axis=1), 0.0, H)
    shape = (H, ns, n_actions)
    return OptimisticValues(q.reshape(shape), v, b_core.reshape(shape), b_diff.reshape(shape),
                            w_norms)


def bonus_dominance(phi_rows, w_norm, beta_n0, beta_n1, e):
    """Compare tight and naive bonuses entrywise.

    Returns ``(hyp, lhs, naive, full_hyp, tight)`` where ``hyp`` marks rows with
    ``sqrt(4e)||phi||_inf <= sqrt(2)||phi||_2`` (and ``beta_n0 <= beta_n1``), ``lhs`` is the
    tight difference term, ``full_hyp`` marks rows where the full tight bonus is provably
    no larger than the naive one, ``sqrt(b0) + sqrt(2e) rho sqrt(b1) <= sqrt(b1)`` with
    ``rho = ||phi||_inf / ||phi||_2``.
    """
    l2 = np.linalg.norm(phi_rows, axis=1)
    linf = np.abs(phi_rows).max(axis=1)
    naive = math.sqrt(2 * beta_n1) * l2 * w_norm
    lhs = math.sqrt(4 * e * beta_n1) * linf * w_norm
    tight = math.sqrt(2 * beta_n0) * l2 * w_norm + lhs
    hyp = (math.sqrt(4 * e) * linf <= math.sqrt(2) * l2 + 1e-15) & (beta_n0 <= beta_n1)
    rho = np.divide(linf, l2, out=np.zeros_like(l2), where=l2 > 0)
    full_hyp = (math.sqrt(beta_n0) + math.sqrt(2 * e) * rho * math.sqrt(beta_n1)
                <= math.sqrt(beta_n1) + 1e-15)
    return hyp, lhs, naive, full_hyp, tight


# --- run options and history ----------------------------------------------------------

@dataclass(frozen=True)
class AgentOptions:
    c_beta: float = DEFAULT_C_BETA
    c_beta_diff: float = 1.0           # multiplier on the difference term of beta_n1
    c_e: float = 1.0
    n_warm: int | None = None          # None: ceil(c_e * max(p, q) / H)
    variant: str = "single"
    exact_top: bool = False
    mu_budget: float | None = None     # None: the generator's budget
    cross_check_every: int = 50
    source_policy: str = "uniform"     # or "ucb"
    solver: SolverOptions = field(default_factory=SolverOptions)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        solver = SolverOptions.from_dict(d.pop("solver", None))
        keep = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(solver=solver, **keep)

    def to_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "solver"}
        out["solver"] = vars(self.solver).copy()
        return out

    def warm_episodes(self, p, q, H):
        if self.n_warm is not None:
            return int(self.n_warm)
        return int(math.ceil(self.c_e * max(p, q) / H))


@dataclass
class EpisodeRecord:
    episode: int
    cumulative_regret: float
    per_episode_regret: float
    est_err_L: float
    est_err_S: float
    est_err_D: float | None
    beta: float
    bonus_mean: float
    in_region: bool
    lambda_min_design: float
    solver_iters: int
    warm: bool = False
    policy_value: float = 0.0
    optimism_gap: float = math.inf
    one_step_slack: float = -math.inf
    bonus_cap_slack: float = -math.inf
    dominance_checked: int = 0
    dominance_violation: float = -math.inf
    full_dominance_checked: int = 0
    full_dominance_violation: float = -math.inf
    v_range_ok: bool = True
    warnings: tuple = ()

    def row(self):
        def fmt(x):
            if x is None:
                return ""
            if isinstance(x, bool):
                return int(x)
            return repr(float(x)) if isinstance(x, float) else x
        return [fmt(getattr(self, c)) for c in TRACE_COLUMNS]


@dataclass
class RunResult:
    trace: RegretTrace
    records: list
    states: list = field(default_factory=list)
    final_state: EstimatorState | None = None
    n_warm: int = 0
    meta: dict = field(default_factory=dict)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRACE_COLUMNS)
            for rec in self.records:
                wr.writerow(rec.row())

    def column(self, name):
        return np.array([np.nan if getattr(r, name) is None else getattr(r, name)
                         for r in self.records], dtype=float)


def read_trace_csv(path):
    """Load a trace CSV into a dict of float arrays keyed by column."""
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != TRACE_COLUMNS:
            raise ValueError(f"unexpected trace header {header}")
        rows = [[float(x) if x != "" else np.nan for x in row] for row in rd]
    arr = np.array(rows, dtype=float).reshape(-1, len(header))
    return {c: arr[:, i] for i, c in enumerate(header)}


# --- helpers --------------------------------------------------------------------------

def _mu_budget(mdp, opts):
    """Incoherence budget for the program: explicit option, else the generator's budget."""
    if opts.mu_budget is not None:
        return opts.mu_budget
    return max(mdp.incoherence_mu, mdp.metadata.get("incoherence_budget", 0.0))


def _rng(rng):
    return rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)


def _audit(mdp, values: OptimisticValues, qstar: ValueTables, rec: EpisodeRecord, cap):
    """Optimism gap, one-step slack and value-range checks against the true model."""
    H, ns, na = mdp.horizon, mdp.n_states, mdp.n_actions
    rec.optimism_gap = float(np.min(values.q_table - qstar.q_star))
    P = mdp.kernel.reshape(ns * na, ns)
    R = mdp.reward
    true_backup = R[None, :] + (P @ values.v_table[1:].T).T        # (H, SA)
    bonus = values.bonus.reshape(H, -1)
    excess = values.q_table.reshape(H, -1) - true_backup - 2 * bonus
    rec.one_step_slack = float(excess.max())
    rec.bonus_cap_slack = float(bonus.max() - cap)
    v = values.v_table
    rec.v_range_ok = bool(v.min() >= 0 and v.max() <= H and np.all(v[H] == 0))


def _err(a, b):
    return float(np.sum((a - b) ** 2))


def _refit(stats, cons, opts: AgentOptions, prev, episode):
    state = solve_low_rank_sparse(stats, cons, opts.solver, prev)
    if prev is not None and opts.cross_check_every and episode % opts.cross_check_every == 0:
        cold = solve_low_rank_sparse(stats, cons, opts.solver, None)
        if cold.objective < state.objective:
            cold.iterations += state.iterations
            state = cold
    return state


# --- Algorithm 1 ----------------------------------------------------------------------

def run_ucb_q(mdp: CompositeMdp, n_episodes: int, opts: AgentOptions | None = None,
              rng=None, frozen_state: EstimatorState | None = None,
              fixed_beta: float | None = None, keep_states=False) -> RunResult:
    """Single-task optimistic learner on ``mdp`` for ``n_episodes`` episodes.

    ``frozen_state``/``fixed_beta`` skip refitting and use a fixed estimate and radius.
    """
    opts = opts or AgentOptions()
    rng = _rng(rng)
    H, ns, na = mdp.horizon, mdp.n_states, mdp.n_actions
    feats = mdp.features
    p, q = feats.p, feats.q
    consts = compute_regularity(mdp)
    d = max(p, q)
    cons = LrsConstraints(mdp.rank_r, _mu_budget(mdp, opts),
                          mdp.sparsity_s, p, q)
    qstar = solve_optimal(mdp)
    trace = RegretTrace(float(mdp.initial_dist @ qstar.v_star[0]))
    n_warm = 0 if frozen_state is not None else opts.warm_episodes(p, q, H)
    stats = GramStats.empty(p, q, H)
    state = frozen_state
    result = RunResult(trace, [], n_warm=n_warm)
    uniform = uniform_policy(mdp)
    for n in range(1, n_episodes + 1):
        warm = n <= n_warm
        if warm:
            policy = uniform
            beta, bonus_mean, in_region = math.inf, math.nan, True
            values = None
        else:
            if state is None:
                state = solve_low_rank_sparse(stats, cons, opts.solver)
            beta = fixed_beta if fixed_beta is not None else beta_single(
                n, H, d, n_episodes, mdp.rank_r, mdp.sparsity_s, consts, opts.c_beta)
            spec = ConfidenceSpec("single", opts.c_beta, 1.0 / (n_episodes ** 2 * H), beta_n=beta)
            values = optimistic_backup(state.core, spec, feats, mdp.reward, H, na)
            policy = values.policy
            bonus_mean = float(values.bonus.mean())
            in_region = (_err(state.l_hat, mdp.core_low_rank)
                         + _err(state.s_hat, mdp.core_sparse)) <= beta
        _, value = evaluate_policy(mdp, policy)
        trace.append(n, value)
        st, ac, nx = sample_episodes(mdp, 1, rng, policy)
        rec_warn = ()
        if frozen_state is None:
            X, Y = regression_rows(feats, st, ac, nx, na)
            stats.add(X, Y)
            state = _refit(stats, cons, opts, None if state is None or warm else
                           (state.l_hat, state.s_hat), n)
            rec_warn = tuple(state.warnings)
        rec = EpisodeRecord(
            episode=n, cumulative_regret=trace.cumulative[-1],
            per_episode_regret=trace.per_episode[-1],
            est_err_L=_err(state.l_hat, mdp.core_low_rank),
            est_err_S=_err(state.s_hat, mdp.core_sparse), est_err_D=None,
            beta=beta, bonus_mean=bonus_mean, in_region=bool(in_region),
            lambda_min_design=_min_eig(stats.xx, stats.n_episodes) if stats.n_obs else 0.0,
            solver_iters=0 if frozen_state is not None else state.iterations,
            warm=warm, policy_value=value, warnings=rec_warn)
        if values is not None:
            cap = consts.c_phi * consts.c_psi * H * math.sqrt(2 * beta)
            _audit(mdp, values, qstar, rec, cap)
        result.records.append(rec)
        if keep_states:
            result.states.append(state)
    result.final_state = state
    result.meta = {"n_warm": n_warm, "constants": consts.as_dict(), "stats": stats}
    return result


# --- Algorithm 2 ----------------------------------------------------------------------

def collect_source(source: CompositeMdp, n0: int, opts: AgentOptions, rng,
                   chunk=5000) -> GramStats:
    """Sufficient statistics of ``n0`` source episodes."""
    feats, H, na = source.features, source.horizon, source.n_actions
    if opts.source_policy == "ucb":
        res = run_ucb_q(source, n0, replace(opts, variant="single"), rng)
        return res.meta["stats"]
    if opts.source_policy != "uniform":
        raise ValueError(f"unknown source policy {opts.source_policy!r}")
    stats = GramStats.empty(feats.p, feats.q, H)
    done = 0
    while done < n0:
        m = min(chunk, n0 - done)
        st, ac, nx = sample_episodes(source, m, rng)
        stats.add(*regression_rows(feats, st, ac, nx, na))
        done += m
    return stats


def fit_pilot(pair: TaskPair, stats: GramStats, opts: AgentOptions) -> EstimatorState:
    src = pair.source
    cons = LrsConstraints(src.rank_r, _mu_budget(src, opts), src.sparsity_s,
                          src.p, src.q)
    return solve_low_rank_sparse(stats, cons, opts.solver)


def run_ucb_tql(pair: TaskPair, n0: int, n_episodes: int, opts: AgentOptions | None = None,
                rng=None, source_stats: GramStats | None = None,
                pilot: EstimatorState | None = None) -> RunResult:
    """Transfer learner: pilot fit on source data, then online sparse-difference fits."""
    opts = opts or AgentOptions(variant="transfer-tight")
    if opts.variant == "single":
        raise ValueError("run_ucb_tql needs a transfer variant")
    rng = _rng(rng)
    src, tgt = pair.source, pair.target
    H, ns, na = tgt.horizon, tgt.n_states, tgt.n_actions
    feats = tgt.features
    p, q = feats.p, feats.q
    d = max(p, q)
    e = pair.e
    consts = compute_regularity(tgt)
    if pilot is None:
        if source_stats is None:
            source_stats = collect_source(src, n0, opts, rng)
        pilot = fit_pilot(pair, source_stats, opts)
    base = pilot.l_hat + pilot.s_hat
    beta0 = beta_initial(max(n0, 1), H, d, src.rank_r, src.sparsity_s, consts, opts.c_beta)
    err_pilot = _err(pilot.l_hat, src.core_low_rank) + _err(pilot.s_hat, src.core_sparse)
    d_true = pair.diff
    qstar = solve_optimal(tgt)
    trace = RegretTrace(float(tgt.initial_dist @ qstar.v_star[0]))
    stats = GramStats.empty(p, q, H)
    D = np.zeros((p, q))
    result = RunResult(trace, [], final_state=pilot)
    for n in range(1, n_episodes + 1):
        beta1 = beta_transfer(n, beta0, e, H, d, n_episodes, consts, opts.c_beta_diff)
        spec = ConfidenceSpec(opts.variant, opts.c_beta, 1.0 / (n_episodes ** 2 * H),
                              beta_n0=beta0, beta_n1=beta1, e=e, exact_top=opts.exact_top)
        values = optimistic_backup(base + D, spec, feats, tgt.reward, H, na)
        policy = values.policy
        if opts.variant == "transfer-tight":
            in_region = (err_pilot <= beta0 and _err(D, d_true) <= beta1
                         and np.count_nonzero(d_true) <= e)
        else:
            in_region = (_err(pilot.l_hat, tgt.core_low_rank)
                         + _err(pilot.s_hat + D, tgt.core_sparse)) <= beta1
        _, value = evaluate_policy(tgt, policy)
        trace.append(n, value)
        st, ac, nx = sample_episodes(tgt, 1, rng, policy)
        stats.add(*regression_rows(feats, st, ac, nx, na))
        D, _, iters, _ = solve_sparse_difference(stats, base, e, opts.solver,
                                                 D if D.any() else None)
        rec = EpisodeRecord(
            episode=n, cumulative_regret=trace.cumulative[-1],
            per_episode_regret=trace.per_episode[-1],
            est_err_L=_err(pilot.l_hat, tgt.core_low_rank),
            est_err_S=_err(pilot.s_hat + D, tgt.core_sparse),
            est_err_D=_err(D, d_true), beta=beta1,
            bonus_mean=float(values.bonus.mean()), in_region=bool(in_region),
            lambda_min_design=_min_eig(stats.xx, stats.n_episodes),
            solver_iters=iters, policy_value=value)
        cap = consts.c_phi * consts.c_psi * H * math.sqrt(2 * beta0) + (
            consts.c_phi_prime * consts.c_psi * H * math.sqrt(4 * e * beta1))
        _audit(tgt, values, qstar, rec, cap)
        _dominance(feats.phi, values, beta0, beta1, e, rec)
        result.records.append(rec)
    result.meta = {"beta_n0": beta0, "pilot_error": err_pilot, "constants": consts.as_dict(),
                   "stats": stats}
    return result


def _dominance(phi, values: OptimisticValues, beta0, beta1, e, rec):
    """Log tight-vs-naive bonus comparisons at the tight run's own value iterates."""
    hyp_count = full_count = 0
    worst = full_worst = -math.inf
    for w_norm in values.w_norm:
        hyp, lhs, naive, full_hyp, tight = bonus_dominance(phi, w_norm, beta0, beta1, e)
        if hyp.any():
            hyp_count += int(hyp.sum())
            worst = max(worst, float((lhs - naive)[hyp].max()))
        if full_hyp.any():
            full_count += int(full_hyp.sum())
            full_worst = max(full_worst, float((tight - naive)[full_hyp].max()))
    rec.dominance_checked, rec.dominance_violation = hyp_count, worst
    rec.full_dominance_checked, rec.full_dominance_violation = full_count, full_worst
