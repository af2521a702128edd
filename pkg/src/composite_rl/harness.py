"""Experiment orchestration: configs, per-seed runs, slope fits, sweeps and summaries.

Every number in a summary can be re-derived from the CSV traces written next to it
(see :func:`verify_summary`).
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .agents import (AgentOptions, ConfidenceSpec, collect_source, fit_pilot, optimistic_backup,
                     read_trace_csv, run_ucb_q, run_ucb_tql)
from .estimation import design_min_eigenvalue
from .exceptions import StructuralViolation
from .generate import (GenConfig, TaskPair, check_assumptions, generate_task_pair, save_pair)
from .mdp import compute_regularity, dumps, load_mdp, mdp_to_dict, regression_rows, sample_episodes

CONFIG_SCHEMA = "experiment/v1"
SUMMARY_SCHEMA = "summary/v1"
BURN_IN = 0.1
FIT_POINTS = 50


# --- config -----------------------------------------------------------------------------

@dataclass
class ExperimentConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    agent: AgentOptions = field(default_factory=AgentOptions)
    n_episodes: int = 300
    n_source: int = 10_000
    seeds: list = field(default_factory=lambda: list(range(10)))
    variants: list = field(default_factory=lambda: ["transfer-tight", "transfer-naive"])
    sweep_n0: list = field(default_factory=lambda: [100, 1_000, 10_000, 100_000])
    sweep_e: list = field(default_factory=list)
    sweep_s: list = field(default_factory=list)
    sweep_r: list = field(default_factory=list)
    regret_range: tuple = (100, None)
    error_range: tuple = (50, None)
    out: str = "out"
    workers: int = 1
    override_assumptions: bool = False
    instance: str | None = None        # optional composite-mdp/v1 file for `single` and `check`

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seeds must be nonempty")
        if self.n_episodes < 1:
            raise ValueError("n_episodes must be >= 1")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        schema = doc.pop("schema", CONFIG_SCHEMA)
        if schema != CONFIG_SCHEMA:
            raise ValueError(f"expected schema {CONFIG_SCHEMA!r}, got {schema!r}")
        gen = GenConfig.from_dict(doc.pop("gen", {}))
        agent = AgentOptions.from_dict(doc.pop("agent", {}))
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        for key in ("regret_range", "error_range"):
            if key in doc:
                doc[key] = tuple(doc[key])
        return cls(gen=gen, agent=agent, **doc)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        out = {"schema": CONFIG_SCHEMA, "gen": self.gen.to_dict(), "agent": self.agent.to_dict()}
        for k in self.__dataclass_fields__:
            if k not in ("gen", "agent"):
                v = getattr(self, k)
                out[k] = list(v) if isinstance(v, tuple) else v
        return out


# --- fits -------------------------------------------------------------------------------

@dataclass(frozen=True)
class FitReport:
    slope: float
    intercept: float
    r_squared: float
    n_points: int

    def to_dict(self):
        return asdict(self)


def fit_points(n_total, lo=1, hi=None, burn_in=BURN_IN, n_points=FIT_POINTS):
    """Log-spaced 1-based episode indices in ``[max(lo, burn-in), hi]``."""
    hi = n_total if hi is None else min(hi, n_total)
    lo = max(lo, int(math.ceil(burn_in * n_total)), 1)
    if hi < lo:
        return np.array([], dtype=int)
    return np.unique(np.round(np.geomspace(lo, hi, n_points)).astype(int))


def loglog_fit(x, y) -> FitReport:
    """OLS of ``log y`` on ``log x``; nonpositive ``y`` values are dropped."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    keep = (x > 0) & (y > 0) & np.isfinite(y)
    lx, ly = np.log(x[keep]), np.log(y[keep])
    if lx.size < 2 or np.ptp(lx) == 0:
        return FitReport(float("nan"), float("nan"), float("nan"), int(lx.size))
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return FitReport(float(slope), float(intercept), float(min(max(r2, 0.0), 1.0)), int(lx.size))


def trace_fit(values, lo=1, hi=None, burn_in=BURN_IN) -> FitReport:
    """Slope fit of a per-episode series against episode index."""
    values = np.asarray(values, float)
    idx = fit_points(len(values), lo, hi, burn_in)
    if idx.size == 0:
        return FitReport(float("nan"), float("nan"), float("nan"), 0)
    return loglog_fit(idx, values[idx - 1])


def knee_fit(x, y):
    """Continuous two-segment fit of ``log y`` against ``log x``.

    Tries every knot between consecutive points (plus a fine grid) and returns the
    least-squares hinge. Degenerates to a single line for fewer than 3 points.
    """
    lx, ly = np.log(np.asarray(x, float)), np.log(np.asarray(y, float))
    if lx.size < 3:
        fit = loglog_fit(x, y)
        return {"knee": None, "slope_left": fit.slope, "slope_right": fit.slope, "sse": 0.0}
    best = None
    for k in np.linspace(lx[0], lx[-1], 201)[1:-1]:
        A = np.column_stack([np.ones_like(lx), lx, np.maximum(0.0, lx - k)])
        coef, *_ = np.linalg.lstsq(A, ly, rcond=None)
        sse = float(np.sum((A @ coef - ly) ** 2))
        if best is None or sse < best[0] - 1e-15:
            best = (sse, k, coef)
    sse, k, coef = best
    return {"knee": float(np.exp(k)), "slope_left": float(coef[1]),
            "slope_right": float(coef[1] + coef[2]), "sse": sse}


# --- seeds and workers ------------------------------------------------------------------

def parse_seeds(text):
    """``"0-9"``, ``"1,4,7"`` or a mix such as ``"0-2,7"``."""
    out = []
    for part in str(text).split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            a, b = part.split("-", 1)
            out.extend(range(int(a), int(b) + 1))
        else:
            out.append(int(part))
    if not out:
        raise ValueError("empty seed list")
    return out


def agent_rng(seed, stream):
    """Independent generator per (seed, purpose); instances use ``GenConfig.seed`` directly."""
    tags = {"target": 1, "source": 2, "check": 3}
    return np.random.default_rng(np.random.SeedSequence([int(seed), tags[stream]]))


def _map(fn, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def make_pair(gen: GenConfig, seed, override=False) -> TaskPair:
    with warnings.catch_warnings():
        if override:
            warnings.simplefilter("ignore", RuntimeWarning)
        return generate_task_pair(replace(gen, seed=int(seed)), override_assumptions=override)


# --- per-seed jobs (top-level so they pickle) --------------------------------------------

def _single_job(cfg: ExperimentConfig, seed, out_dir):
    if cfg.instance:
        mdp = load_mdp(cfg.instance).validate()
    else:
        mdp = make_pair(replace(cfg.gen, diff_sparsity_e=0), seed, cfg.override_assumptions).target
    res = run_ucb_q(mdp, cfg.n_episodes, cfg.agent, agent_rng(seed, "target"))
    path = Path(out_dir) / f"single_seed{seed}.csv"
    res.write_csv(path)
    return _audit_summary(seed, res, path)


def _audit_summary(seed, res, path):
    recs = [r for r in res.records if not r.warm]
    in_reg = [r for r in recs if r.in_region]
    return {
        "seed": int(seed),
        "csv": path.name,
        "total_regret": res.trace.total,
        "n_warm": res.n_warm,
        "in_region_fraction": (len(in_reg) / len(recs)) if recs else 1.0,
        "min_optimism_gap_in_region": min((r.optimism_gap for r in in_reg), default=None),
        "max_one_step_slack_in_region": max((r.one_step_slack for r in in_reg), default=None),
        "max_bonus_cap_slack_in_region": max((r.bonus_cap_slack for r in in_reg), default=None),
        "v_range_ok": all(r.v_range_ok for r in res.records),
        "min_episode_regret": min(res.trace.per_episode),
        "dominance_checked": sum(r.dominance_checked for r in res.records),
        "max_dominance_violation": max((r.dominance_violation for r in res.records),
                                       default=-math.inf),
        "full_dominance_checked": sum(r.full_dominance_checked for r in res.records),
        "max_full_dominance_violation": max((r.full_dominance_violation for r in res.records),
                                            default=-math.inf),
    }


def _transfer_job(cfg: ExperimentConfig, seed, out_dir, n0=None, tag="transfer",
                  with_single=True):
    n0 = cfg.n_source if n0 is None else int(n0)
    pair = make_pair(cfg.gen, seed, cfg.override_assumptions)
    stats = collect_source(pair.source, n0, cfg.agent, agent_rng(seed, "source"))
    pilot = fit_pilot(pair, stats, cfg.agent)
    out = {"seed": int(seed), "n0": n0, "variants": {}}
    for variant in cfg.variants:
        opts = replace(cfg.agent, variant=variant)
        res = run_ucb_tql(pair, n0, cfg.n_episodes, opts, agent_rng(seed, "target"), pilot=pilot)
        path = Path(out_dir) / f"{tag}_{variant}_n0{n0}_seed{seed}.csv"
        res.write_csv(path)
        summ = _audit_summary(seed, res, path)
        summ["beta_n0"] = res.meta["beta_n0"]
        summ["pilot_error"] = res.meta["pilot_error"]
        out["variants"][variant] = summ
    if with_single:
        res = run_ucb_q(pair.target, cfg.n_episodes, replace(cfg.agent, variant="single"),
                        agent_rng(seed, "target"))
        path = Path(out_dir) / f"{tag}_single_seed{seed}.csv"
        res.write_csv(path)
        out["single"] = _audit_summary(seed, res, path)
    return out


# --- commands -----------------------------------------------------------------------------

def _prepare(out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_summary(out, doc):
    doc = {"schema": SUMMARY_SCHEMA, **doc}
    with open(out / "summary.json", "w") as fh:
        json.dump(doc, fh, indent=1, default=_json_default)
        fh.write("\n")
    return doc


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _median(xs):
    xs = [x for x in xs if x is not None]
    return float(np.median(xs)) if xs else None


def cmd_gen(cfg: ExperimentConfig):
    out = _prepare(cfg.out)
    files = []
    for seed in cfg.seeds:
        pair = make_pair(cfg.gen, seed, cfg.override_assumptions)
        for role, mdp in (("source", pair.source), ("target", pair.target)):
            path = out / f"{role}_seed{seed}.json"
            path.write_text(dumps(mdp_to_dict(mdp)))
            files.append(path.name)
        save_pair(pair, out / f"pair_seed{seed}.json")
        files.append(f"pair_seed{seed}.json")
    return {"files": files}


def cmd_single(cfg: ExperimentConfig):
    out = _prepare(cfg.out)
    runs = _map(_single_job, [(cfg, s, str(out)) for s in cfg.seeds], cfg.workers)
    return _write_summary(out, {"command": "single", "config": cfg.to_dict(),
                                "runs": runs, **single_fits(out, runs, cfg)})


def single_fits(out, runs, cfg: ExperimentConfig):
    """Per-seed regret and error fits from the CSVs, plus their medians."""
    reg, err = [], []
    for run in runs:
        tr = read_trace_csv(Path(out) / run["csv"])
        reg.append(trace_fit(tr["cumulative_regret"], *cfg.regret_range).to_dict())
        err.append(trace_fit(tr["est_err_L"] + tr["est_err_S"], *cfg.error_range).to_dict())
    med = lambda fits, k: _median([f[k] for f in fits if not math.isnan(f[k])])
    return {"regret_fits": reg, "error_fits": err,
            "regret_fit_median": {"slope": med(reg, "slope"), "r_squared": med(reg, "r_squared")},
            "error_fit_median": {"slope": med(err, "slope"), "r_squared": med(err, "r_squared")}}


def cmd_transfer(cfg: ExperimentConfig):
    out = _prepare(cfg.out)
    runs = _map(_transfer_job, [(cfg, s, str(out)) for s in cfg.seeds], cfg.workers)
    return _write_summary(out, {"command": "transfer", "config": cfg.to_dict(), "runs": runs,
                                **transfer_ratios(out, runs)})


def transfer_ratios(out, runs):
    """Paired-seed medians recomputed from the CSVs."""
    def total(name):
        tr = read_trace_csv(Path(out) / name)
        return float(tr["cumulative_regret"][-1])

    variants = sorted({v for r in runs for v in r["variants"]})
    totals = {v: [total(r["variants"][v]["csv"]) for r in runs] for v in variants}
    totals["single"] = [total(r["single"]["csv"]) for r in runs if "single" in r]
    med = {k: _median(v) for k, v in totals.items()}
    doc = {"totals": totals, "median_regret": med}
    if "transfer-tight" in med and totals["single"]:
        doc["ratio_tight_over_single"] = _ratio(med["transfer-tight"], med["single"])
        doc["paired_ratio_tight_over_single"] = _median(
            [_ratio(t, s) for t, s in zip(totals["transfer-tight"], totals["single"])])
    if "transfer-tight" in med and "transfer-naive" in med:
        doc["ratio_tight_over_naive"] = _ratio(med["transfer-tight"], med["transfer-naive"])
    return doc


def _ratio(a, b):
    """``a / b`` with equal totals (including 0 / 0) counted as 1."""
    if a == b:
        return 1.0
    return a / b if b > 0 else math.inf


def cmd_sweep(cfg: ExperimentConfig):
    out = _prepare(cfg.out)
    if not cfg.sweep_n0:
        raise ValueError("sweep_n0 must be nonempty for the sweep command")
    cells = []
    for n0 in cfg.sweep_n0:
        jobs = [(cfg, s, str(out), n0, "sweep", False) for s in cfg.seeds]
        cells.append({"n0": int(n0), "runs": _map(_transfer_job, jobs, cfg.workers)})
    return _write_summary(out, {"command": "sweep", "config": cfg.to_dict(), "cells": cells,
                                **sweep_table(out, cells, cfg)})


def sweep_table(out, cells, cfg: ExperimentConfig):
    """Median regret per N0 and variant, the theoretical crossover and a knee fit."""
    consts = compute_regularity(make_pair(cfg.gen, cfg.seeds[0], True).target)
    crossover = cfg.n_episodes * (cfg.gen.rank_r * consts.c_phi ** 2 + cfg.gen.sparsity_s)
    rows, by_variant = [], {}
    for cell in cells:
        for variant in cfg.variants:
            totals = [float(read_trace_csv(Path(out) / r["variants"][variant]["csv"])
                            ["cumulative_regret"][-1]) for r in cell["runs"]]
            med = float(np.median(totals))
            rows.append({"n0": cell["n0"], "variant": variant, "median_regret": med,
                         "theoretical_crossover": crossover})
            by_variant.setdefault(variant, []).append((cell["n0"], med))
    fits = {}
    for variant, pts in by_variant.items():
        n0s, meds = np.array(pts, dtype=float).T
        final = (loglog_fit(n0s[-2:], meds[-2:]).slope if len(n0s) >= 2 else None)
        fits[variant] = {"knee": knee_fit(n0s, meds), "final_segment_slope": final,
                         "nonincreasing": bool(np.all(np.diff(meds) <= 0))}
    with open(Path(out) / "sweep.csv", "w") as fh:
        fh.write("n0,variant,median_regret,theoretical_crossover\n")
        for row in rows:
            fh.write(f"{row['n0']},{row['variant']},{row['median_regret']!r},"
                     f"{row['theoretical_crossover']!r}\n")
    return {"table": rows, "theoretical_crossover": crossover, "fits": fits}


def bonus_oracle_probe(mdp, rng, n_dirs=10_000, beta=0.1):
    """Sampled check that the closed-form single bonus dominates random CR directions
    and is attained by the rank-one direction. Returns the worst slacks."""
    feats = mdp.features
    v = rng.uniform(0, mdp.horizon, size=mdp.n_states)
    w = feats.psi.T @ v
    sa = int(rng.integers(feats.phi.shape[0]))
    phi = feats.phi[sa]
    bonus = math.sqrt(2 * beta) * np.linalg.norm(phi) * np.linalg.norm(w)
    dirs = rng.standard_normal((n_dirs, 2, feats.p, feats.q))
    dirs *= math.sqrt(beta) / np.sqrt(np.sum(dirs ** 2, axis=(1, 2, 3)))[:, None, None, None]
    vals = np.einsum("i,nkij,j->n", phi, dirs, w)
    outer = np.outer(phi, w)
    attain = math.sqrt(beta / 2) * outer / np.linalg.norm(outer)
    attained = 2 * float(phi @ attain @ w)
    return {"max_sampled_minus_bonus": float(vals.max() - bonus),
            "attained_minus_bonus": attained - bonus}


def cmd_check(cfg: ExperimentConfig):
    """Assumption report, design eigenvalue, bonus probes and a short optimism audit.

    Returns ``(report, ok)``; structural problems are reported rather than raised.
    """
    out = _prepare(cfg.out)
    report = {"command": "check", "failures": [], "warnings": []}
    try:
        if cfg.instance:
            mdp = load_mdp(cfg.instance)
            _ = mdp.kernel
            pair = None
        else:
            pair = make_pair(cfg.gen, cfg.seeds[0], override=True)
            mdp = pair.target
    except (StructuralViolation, ValueError) as exc:
        kind = "structural-violation" if isinstance(exc, StructuralViolation) else "invalid-instance"
        report["failures"].append(f"{kind}: {exc}")
        _write_check(out, report)
        return report, False
    try:
        mdp.validate()
    except (StructuralViolation, ValueError) as exc:
        report["failures"].append(f"invalid-instance: {exc}")
        _write_check(out, report)
        return report, False
    rng = agent_rng(cfg.seeds[0], "check")
    assumptions = check_assumptions(pair if pair is not None else mdp,
                                    cfg.gen if pair is not None else None, rng)
    report["assumptions"] = assumptions
    if not assumptions["sufficient_sparsity_ok"]:
        report["warnings"].append(
            f"sparsity over sufficient-sparsity bound "
            f"(ratio {assumptions['sufficient_sparsity_ratio']:.3g})")
    n_warm = cfg.agent.warm_episodes(mdp.p, mdp.q, mdp.horizon)
    st, ac, nx = sample_episodes(mdp, max(n_warm, 2), rng)
    X, _ = regression_rows(mdp.features, st, ac, nx, mdp.n_actions)
    report["warm_start_lambda_min"] = design_min_eigenvalue(X, max(n_warm, 2))
    probes = [bonus_oracle_probe(mdp, rng, n_dirs=2000) for _ in range(5)]
    report["bonus_probes"] = probes
    if max(p["max_sampled_minus_bonus"] for p in probes) > 1e-10:
        report["failures"].append("bonus does not dominate sampled directions")
    if max(abs(p["attained_minus_bonus"]) for p in probes) > 1e-10:
        report["failures"].append("attaining direction does not reproduce the bonus")
    # beta = 0 with the true core must reproduce Q*
    from .oracle import solve_optimal
    vals = optimistic_backup(mdp.core, ConfidenceSpec("single"), mdp.features, mdp.reward,
                             mdp.horizon, mdp.n_actions)
    q_err = float(np.abs(vals.q_table - solve_optimal(mdp).q_star).max())
    report["zero_radius_q_error"] = q_err
    if q_err > 1e-10:
        report["failures"].append(f"zero-radius backup differs from Q* by {q_err:.3g}")
    res = run_ucb_q(mdp, min(cfg.n_episodes, 50), cfg.agent, rng)
    audit = _audit_summary(cfg.seeds[0], res, Path("check.csv"))
    report["optimism_audit"] = audit
    gap = audit["min_optimism_gap_in_region"]
    if gap is not None and gap < -1e-9:
        report["failures"].append(f"optimism violated on a good-event episode ({gap:.3g})")
    if not audit["v_range_ok"]:
        report["failures"].append("value table left [0, H]")
    if audit["min_episode_regret"] < -1e-10:
        report["failures"].append("negative per-episode regret")
    _write_check(out, report)
    return report, not report["failures"]


def _write_check(out, report):
    with open(out / "check.json", "w") as fh:
        json.dump({"schema": SUMMARY_SCHEMA, **report}, fh, indent=1, default=_json_default)
        fh.write("\n")


def verify_summary(out_dir, tol=1e-9):
    """Recompute fits/ratios from the CSVs in ``out_dir`` and compare with summary.json."""
    out = Path(out_dir)
    with open(out / "summary.json") as fh:
        doc = json.load(fh)
    cfg = ExperimentConfig.from_dict(doc["config"])
    if doc["command"] == "single":
        fresh = single_fits(out, doc["runs"], cfg)
        pairs = [(a[k], b[k]) for key in ("regret_fits", "error_fits")
                 for a, b in zip(fresh[key], doc[key]) for k in ("slope", "intercept")]
    elif doc["command"] == "transfer":
        fresh = transfer_ratios(out, doc["runs"])
        pairs = [(fresh["median_regret"][k], doc["median_regret"][k]) for k in fresh["median_regret"]]
    elif doc["command"] == "sweep":
        fresh = sweep_table(out, doc["cells"], cfg)
        pairs = [(a["median_regret"], b["median_regret"]) for a, b in zip(fresh["table"], doc["table"])]
    else:
        raise ValueError(f"nothing to verify for {doc['command']!r}")
    for a, b in pairs:
        if not (a is None and b is None) and not (
                (isinstance(a, float) and math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol):
            return False
    return True


COMMANDS = {"gen": cmd_gen, "single": cmd_single, "transfer": cmd_transfer,
            "sweep": cmd_sweep, "check": cmd_check}
