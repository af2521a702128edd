"""Synthetic composite MDPs and source/target task pairs.

Low-rank cores are row-wise convex mixtures of ``r`` Dirichlet base distributions,
so every row is a distribution by construction.  Sparse parts are sums of
zero-row-sum mass transfers, which keep rows stochastic exactly.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import mdp as mdp_mod
from .exceptions import AssumptionViolation, IncoherenceBudgetError, InfeasiblePerturbationError
from .mdp import CompositeMdp, FeatureTables, canonical_features, numerical_rank

PAIR_SCHEMA = "task-pair/v1"
MAX_RETRIES = 100


@dataclass(frozen=True)
class GenConfig:
    n_states: int = 6
    n_actions: int = 3
    horizon: int = 5
    rank_r: int = 2
    sparsity_s: int = 6
    diff_sparsity_e: int = 0
    incoherence_budget_mu: float = 10.0
    perturb_magnitude: float = 0.1
    mode: str = "canonical-one-hot"
    c_s_constant: float = 1.0
    seed: int = 0
    dirichlet_alpha: float = 1.0
    allow_overlap: bool = False

    def __post_init__(self):
        if self.mode not in ("canonical-one-hot", "feature-transform"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.diff_sparsity_e > self.sparsity_s:
            raise ValueError("diff_sparsity_e must not exceed sparsity_s")
        if not 0 < self.perturb_magnitude < 0.5:
            raise ValueError("perturb_magnitude must lie in (0, 0.5)")
        if self.rank_r < 1:
            raise ValueError("rank_r must be >= 1")

    @property
    def p(self):
        return self.n_states * self.n_actions

    @property
    def q(self):
        return self.n_states

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class TaskPair:
    source: CompositeMdp
    target: CompositeMdp
    diff: np.ndarray
    e: int

    def __post_init__(self):
        if not np.array_equal(self.source.core_low_rank, self.target.core_low_rank):
            raise ValueError("source and target must share the low-rank core")


# --- incoherence ------------------------------------------------------------

def singular_factors(L, tol=1e-10):
    """Left/right singular vectors for singular values above ``tol * sigma_max``."""
    U, sv, Vt = np.linalg.svd(L, full_matrices=False)
    if sv.size == 0 or sv[0] == 0:
        return U[:, :0], sv[:0], Vt[:0].T
    k = int(np.sum(sv > tol * sv[0]))
    return U[:, :k], sv[:k], Vt[:k].T


def measured_incoherence(L, tol=1e-10):
    """Smallest mu with ``||U||_{2,inf} <= sqrt(mu r / p)`` and the same for V (q)."""
    U, _, V = singular_factors(L, tol)
    r = U.shape[1]
    if r == 0:
        return 0.0
    p, q = L.shape
    mu_u = p / r * np.max(np.sum(U ** 2, axis=1))
    mu_v = q / r * np.max(np.sum(V ** 2, axis=1))
    return float(max(mu_u, mu_v))


# --- low-rank core ------------------------------------------------------------

def mix_bases(weights, bases):
    """Rows of ``weights`` (p x r, rows on the simplex) mix the r base distributions."""
    return np.asarray(weights, float) @ np.asarray(bases, float)


def generate_low_rank_core(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    p, q, r = cfg.p, cfg.q, cfg.rank_r
    if r > min(p, q):
        raise ValueError(f"rank_r={r} exceeds min(p, q)={min(p, q)}")
    for _ in range(MAX_RETRIES):
        bases = rng.dirichlet(np.full(q, cfg.dirichlet_alpha), size=r)
        weights = rng.dirichlet(np.ones(r), size=p)
        if r == 1:
            weights = np.ones((p, 1))   # draws may come back as 1 - ulp
        L = mix_bases(weights, bases)
        if numerical_rank(L) == r and measured_incoherence(L) <= cfg.incoherence_budget_mu:
            return L
    raise IncoherenceBudgetError(
        f"no rank-{r} core with mu <= {cfg.incoherence_budget_mu} after {MAX_RETRIES} draws")


# --- sparse perturbations -----------------------------------------------------

def generate_sparse_perturbation(L, k, delta, rng, forbidden=None, max_tries=10_000):
    """Sum of ``k // 2`` disjoint mass transfers of size ``delta`` within rows of ``L``.

    Each transfer takes ``delta`` from an entry holding at least ``delta`` and moves
    it to another entry of the same row holding at most ``1 - delta``.
    ``forbidden`` is a boolean mask of entries that may not be touched.
    """
    L = np.asarray(L, float)
    if k % 2:
        raise ValueError("k must be even (perturbations come in mass-transfer pairs)")
    S = np.zeros_like(L)
    used = np.zeros(L.shape, bool) if forbidden is None else np.array(forbidden, bool)
    p, q = L.shape
    placed = tries = 0
    while placed < k // 2:
        tries += 1
        if tries > max_tries:
            raise InfeasiblePerturbationError(
                f"placed {placed} of {k // 2} transfers of size {delta}")
        i = int(rng.integers(p))
        free = ~used[i]
        donors = np.flatnonzero(free & (L[i] >= delta))
        takers = np.flatnonzero(free & (L[i] <= 1 - delta))
        if donors.size == 0 or takers.size < 1:
            continue
        j_minus = int(rng.choice(donors))
        takers = takers[takers != j_minus]
        if takers.size == 0:
            continue
        j_plus = int(rng.choice(takers))
        S[i, j_minus] -= delta
        S[i, j_plus] += delta
        used[i, j_minus] = used[i, j_plus] = True
        placed += 1
    return S


# --- features and task pairs ----------------------------------------------------

def _signed_permutation(n, rng):
    out = np.zeros((n, n))
    out[np.arange(n), rng.permutation(n)] = rng.choice([-1.0, 1.0], size=n)
    return out


def _scaled_permutation(n, rng, max_cond=10.0):
    scales = np.exp(rng.uniform(0, np.log(max_cond), size=n))
    scales[0], scales[-1] = 1.0, max_cond ** 0.5  # keep cond(T) strictly inside the cap
    out = np.zeros((n, n))
    out[np.arange(n), rng.permutation(n)] = scales
    return out


def _feature_transform(cfg, rng):
    """Maps ``(O, T)`` with ``phi' = O phi`` (O orthogonal) and ``psi' = T psi``.

    Both maps are (scaled) permutations so the transformed sparse core
    ``O S T^{-1}`` keeps exactly the same number of nonzeros.
    """
    return _signed_permutation(cfg.p, rng), _scaled_permutation(cfg.q, rng)


def _build_mdp(cfg, features, L, S, reward, mu0, transform=None, meta=None):
    if transform is not None:
        O, T = transform
        T_inv = np.linalg.inv(T)
        L, S = O @ L @ T_inv, O @ S @ T_inv
    mu_meas = measured_incoherence(L)
    mdp = CompositeMdp(
        n_states=cfg.n_states, n_actions=cfg.n_actions, horizon=cfg.horizon,
        features=features, core_low_rank=L, core_sparse=S, reward=reward,
        initial_dist=mu0, rank_r=cfg.rank_r, sparsity_s=int(np.count_nonzero(S)),
        incoherence_mu=mu_meas, metadata=dict(meta or {}))
    return mdp.validate()


def _features_for(cfg, transform):
    base = canonical_features(cfg.n_states, cfg.n_actions)
    if transform is None:
        return base
    O, T = transform
    return FeatureTables.from_features(base.phi @ O.T, base.psi @ T.T)


def sparsity_bound(p, q, mu, r, c_s=1.0):
    """Largest sparsity permitted by the sufficient-sparsity condition."""
    return max(p, q) / (4.0 * c_s * mu * r ** 3)


def generate_task_pair(cfg: GenConfig, rng: np.random.Generator | None = None,
                       override_assumptions: bool = False) -> TaskPair:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    s0 = cfg.sparsity_s - cfg.diff_sparsity_e
    L = generate_low_rank_core(cfg, rng)
    mu = measured_incoherence(L)
    bound = sparsity_bound(cfg.p, cfg.q, mu, cfg.rank_r, cfg.c_s_constant)
    if cfg.sparsity_s > bound:
        msg = (f"sparsity {cfg.sparsity_s} exceeds sufficient-sparsity bound {bound:.3g} "
               f"(mu={mu:.3g}, r={cfg.rank_r}, C_S={cfg.c_s_constant})")
        if not override_assumptions:
            raise AssumptionViolation(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
    S0 = generate_sparse_perturbation(L, s0, cfg.perturb_magnitude, rng)
    forbidden = None if cfg.allow_overlap else S0 != 0
    D = generate_sparse_perturbation(L + S0, cfg.diff_sparsity_e, cfg.perturb_magnitude, rng,
                                     forbidden=forbidden)
    S1 = S0 + D
    reward = rng.uniform(0.0, 1.0, size=cfg.p)
    mu0 = rng.dirichlet(np.ones(cfg.n_states))
    mu0 = mu0 / mu0.sum()
    transform = _feature_transform(cfg, rng) if cfg.mode == "feature-transform" else None
    features = _features_for(cfg, transform)
    meta = {"seed": cfg.seed, "mode": cfg.mode, "incoherence_budget": cfg.incoherence_budget_mu}
    source = _build_mdp(cfg, features, L, S0, reward, mu0, transform, {**meta, "role": "source"})
    target = _build_mdp(cfg, features, L, S1, reward, mu0, transform, {**meta, "role": "target"})
    diff = target.core_sparse - source.core_sparse
    return TaskPair(source, target, diff, int(np.count_nonzero(diff)))


def generate_mdp(cfg: GenConfig, rng: np.random.Generator | None = None,
                 override_assumptions: bool = False) -> CompositeMdp:
    """Single composite MDP whose sparse core has ``cfg.sparsity_s`` nonzeros."""
    cfg = replace(cfg, diff_sparsity_e=0)
    return generate_task_pair(cfg, rng, override_assumptions).target


# --- diagnostics ------------------------------------------------------------------

def separation_ratio(G1, G2):
    """``||G1 - G2||_max^2 / ||G1 - G2||_F^2``, or None when the matrices coincide."""
    delta = np.asarray(G1, float) - np.asarray(G2, float)
    fro2 = float(np.sum(delta ** 2))
    if fro2 == 0.0:
        return None
    return float(np.max(np.abs(delta)) ** 2 / fro2)


def calibrate_separation_constant(cfg: GenConfig, rng, n_pairs=50):
    """Largest observed ``ratio / (mu r^4 / max(p, q))`` over a batch of core pairs."""
    worst, ratios = 0.0, []
    for _ in range(n_pairs):
        G1, G2 = generate_low_rank_core(cfg, rng), generate_low_rank_core(cfg, rng)
        ratio = separation_ratio(G1, G2)
        if ratio is None:
            continue
        mu = max(measured_incoherence(G1), measured_incoherence(G2))
        ratios.append(ratio)
        worst = max(worst, ratio / (mu * cfg.rank_r ** 4 / max(cfg.p, cfg.q)))
    return {"max_ratio": max(ratios) if ratios else None, "c_calibrated": worst,
            "n_pairs": len(ratios)}


def check_assumptions(obj, cfg: GenConfig | None = None, rng=None, probe_episodes=200):
    """Diagnostic report for a CompositeMdp or TaskPair; never raises."""
    from .estimation import design_min_eigenvalue

    rng = np.random.default_rng(0) if rng is None else rng
    mdps = [obj.source, obj.target] if isinstance(obj, TaskPair) else [obj]
    ref = mdps[-1]
    L = ref.core_low_rank
    r = numerical_rank(L)
    mu = measured_incoherence(L)
    p, q = L.shape
    c_s = cfg.c_s_constant if cfg is not None else 1.0
    s = max(int(np.count_nonzero(m.core_sparse)) for m in mdps)
    bound = sparsity_bound(p, q, mu, max(r, 1), c_s) if r else float("inf")
    report = {
        "incoherence_mu": mu,
        "rank": r,
        "sparsities": [int(np.count_nonzero(m.core_sparse)) for m in mdps],
        "sufficient_sparsity_ratio": s / bound,
        "sufficient_sparsity_ok": s <= bound,
    }
    if isinstance(obj, TaskPair):
        report["diff_nonzeros"] = int(np.count_nonzero(obj.diff))
    if cfg is not None:
        other = generate_low_rank_core(cfg, rng)
        ratio = separation_ratio(L, other)
        report["separation_ratio"] = ratio if ratio is not None else "not-applicable"
        report["separation_bound_unit_c"] = mu * max(r, 1) ** 4 / max(p, q)
    states, actions, nxt = mdp_mod.sample_episodes(ref, probe_episodes, rng)
    X, _ = mdp_mod.regression_rows(ref.features, states, actions, nxt, ref.n_actions)
    report["probe_lambda_min"] = design_min_eigenvalue(X, probe_episodes)
    return report


# --- task-pair/v1 -------------------------------------------------------------------

def pair_to_dict(pair: TaskPair) -> dict:
    return {
        "schema": PAIR_SCHEMA,
        "source": mdp_mod.mdp_to_dict(pair.source),
        "target": mdp_mod.mdp_to_dict(pair.target),
        "diff": mdp_mod._coo(pair.diff),
        "e": pair.e,
    }


def pair_from_dict(doc: dict) -> TaskPair:
    if doc.get("schema") != PAIR_SCHEMA:
        raise ValueError(f"expected schema {PAIR_SCHEMA!r}, got {doc.get('schema')!r}")
    source = mdp_mod.mdp_from_dict(doc["source"])
    target = mdp_mod.mdp_from_dict(doc["target"])
    diff = mdp_mod._from_coo(doc["diff"], (source.p, source.q))
    return TaskPair(source, target, diff, int(doc["e"]))


def save_pair(pair: TaskPair, path):
    with open(path, "w") as fh:
        fh.write(mdp_mod.dumps(pair_to_dict(pair)))


def load_pair(path) -> TaskPair:
    with open(path) as fh:
        return pair_from_dict(json.load(fh))
