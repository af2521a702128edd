"""Acceptance criteria C1-C11.

Each test records its criterion number, a short description and the measured values;
``conftest.py`` prints one PASS/FAIL line per criterion at the end of the session.
Run just this file with ``pytest tests/test_acceptance.py -v``.
"""
import math
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from composite_rl.agents import AgentOptions, read_trace_csv, run_ucb_q
from composite_rl.estimation import (LrsConstraints, RegressionData, fit_low_rank_sparse,
                                     fit_sparse_difference)
from composite_rl.generate import GenConfig, generate_task_pair
from composite_rl.harness import (ExperimentConfig, agent_rng, bonus_oracle_probe, cmd_sweep,
                                  cmd_transfer, loglog_fit, trace_fit, verify_summary)
from composite_rl.mdp import numerical_rank, regression_rows, transition_prob
from composite_rl.oracle import brute_force_optimum, n_deterministic_policies, solve_optimal

from conftest import REFERENCE, REFERENCE_SEEDS, make_mdp, make_pair

TRANSFER_GEN = GenConfig(**REFERENCE, diff_sparsity_e=2)


def tag(record_property, crit, description):
    record_property("criterion", crit)
    record_property("description", description)


def measured(record_property, text):
    record_property("measured", text)
    print(text)


# --- shared batteries -----------------------------------------------------------------------

@pytest.fixture(scope="session")
def transfer_battery(tmp_path_factory):
    """N0 = 1e4, N = 500, e = 2, s = 20, seeds 0-9; tight, naive and single-task runs."""
    out = tmp_path_factory.mktemp("transfer")
    cfg = ExperimentConfig(gen=replace(TRANSFER_GEN, sparsity_s=20), n_episodes=500,
                           n_source=10_000, seeds=list(REFERENCE_SEEDS),
                           override_assumptions=True, out=str(out))
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        doc = cmd_transfer(cfg)
    return doc, out, time.perf_counter() - t0


@pytest.fixture(scope="session")
def sweep_battery(tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    cfg = ExperimentConfig(gen=replace(TRANSFER_GEN, sparsity_s=20), n_episodes=500,
                           seeds=list(REFERENCE_SEEDS), variants=["transfer-tight"],
                           sweep_n0=[100, 1_000, 10_000, 100_000],
                           override_assumptions=True, out=str(out))
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        doc = cmd_sweep(cfg)
    return doc, out, time.perf_counter() - t0


# --- C1 ----------------------------------------------------------------------------------------

def test_c1_kernel_validity(record_property):
    tag(record_property, 1, "kernel validity on 100 generated instances")
    t0 = time.perf_counter()
    grid = []
    for ns, na in [(4, 2), (6, 3), (10, 2), (12, 5), (20, 3), (15, 4)]:
        for r in (1, 2, 3):
            for s, e in [(0, 0), (4, 2), (8, 2), (12, 4)]:
                grid.append((ns, na, r, s, e))
    rng = np.random.default_rng(0)
    picks = [grid[i] for i in rng.choice(len(grid), 100, replace=len(grid) < 100)]
    worst_sum = worst_neg = 0.0
    count = 0
    for k, (ns, na, r, s, e) in enumerate(picks):
        mode = "feature-transform" if k % 3 == 0 else "canonical-one-hot"
        pair = make_pair(n_states=ns, n_actions=na, rank_r=r, sparsity_s=s, diff_sparsity_e=e,
                         mode=mode, seed=k)
        assert pair.source.p <= 60 and pair.source.q <= 20
        for m, nnz in ((pair.source, s - e), (pair.target, s)):
            raw = m.raw_kernel
            worst_sum = max(worst_sum, float(np.abs(raw.sum(axis=1) - 1).max()))
            worst_neg = min(worst_neg, float(raw.min()))
            assert numerical_rank(m.core_low_rank) == r
            assert np.count_nonzero(m.core_sparse) == nnz
        assert np.count_nonzero(pair.diff) == e
        count += 1
    elapsed = time.perf_counter() - t0
    measured(record_property, f"instances={count} max|rowsum-1|={worst_sum:.2e} "
                              f"min entry={worst_neg:.2e} time={elapsed:.1f}s")
    assert count == 100
    assert worst_sum <= 1e-9 and worst_neg >= -1e-12
    assert elapsed < 60


# --- C2 ----------------------------------------------------------------------------------------

def test_c2_population_identity(record_property):
    tag(record_property, 2, "Monte-Carlo mean target matches phi^T M* within 3 SE")
    t0 = time.perf_counter()
    instances = [make_mdp(seed=0), make_mdp(seed=1, mode="feature-transform"),
                 make_mdp(n_states=8, n_actions=2, rank_r=2, sparsity_s=4, seed=2)]
    rng = np.random.default_rng(42)
    worst, coords = 0.0, 0
    n = 100_000
    for m in instances:
        for _ in range(5):
            s, a = int(rng.integers(m.n_states)), int(rng.integers(m.n_actions))
            nxt = rng.choice(m.n_states, size=n, p=transition_prob(m, s, a))
            _, Y = regression_rows(m.features, np.full(n, s), np.full(n, a), nxt, m.n_actions)
            target = m.features.phi[s * m.n_actions + a] @ m.core
            se = Y.std(axis=0, ddof=1) / math.sqrt(n)
            dev = np.abs(Y.mean(axis=0) - target)
            z = np.where(se > 0, dev / np.where(se > 0, se, 1), np.where(dev > 1e-12, np.inf, 0))
            worst = max(worst, float(z.max()))
            coords += z.size
    elapsed = time.perf_counter() - t0
    measured(record_property, f"coords={coords} max |z|={worst:.2f} time={elapsed:.1f}s")
    assert worst <= 3.0
    assert elapsed < 120


# --- C3 ----------------------------------------------------------------------------------------

def test_c3_optimism_audit(record_property):
    tag(record_property, 3, "optimism on good-event episodes, >= 95% coverage (N=300)")
    t0 = time.perf_counter()
    gaps, flags = [], []
    for seed in REFERENCE_SEEDS:
        res = run_ucb_q(make_mdp(**REFERENCE, seed=seed), 300, rng=agent_rng(seed, "target"))
        post = [r for r in res.records if not r.warm]
        flags.extend(r.in_region for r in post)
        gaps.extend(r.optimism_gap for r in post if r.in_region)
    elapsed = time.perf_counter() - t0
    frac = float(np.mean(flags))
    min_gap = min(gaps)
    measured(record_property, f"in_region={frac:.3f} min gap={min_gap:.3g} time={elapsed:.0f}s")
    assert min_gap >= -1e-9
    assert frac >= 0.95
    assert elapsed < 600


# --- C4, C5 ----------------------------------------------------------------------------------------

def test_c4_estimation_error_decay(record_property, reference_runs_2000):
    tag(record_property, 4, "log-log error slope over n in [50, 2000] is -1 +/- 0.3, r2 >= 0.9")
    runs, elapsed = reference_runs_2000
    fits = [trace_fit(r.column("est_err_L") + r.column("est_err_S"), 50, 2000, burn_in=0.0)
            for r in runs]
    slope = float(np.median([f.slope for f in fits]))
    r2 = float(np.median([f.r_squared for f in fits]))
    measured(record_property, f"median slope={slope:.3f} median r2={r2:.3f} time={elapsed:.0f}s")
    assert elapsed < 1200
    assert abs(slope + 1.0) <= 0.3 and r2 >= 0.9


def test_c5_regret_scaling(record_property, reference_runs_2000):
    tag(record_property, 5, "log-log regret slope over N in [100, 2000] within [0.4, 0.8]")
    runs, elapsed = reference_runs_2000
    slopes = [trace_fit(r.trace.cumulative, 100, 2000, burn_in=0.0).slope for r in runs]
    slope = float(np.median(slopes))
    measured(record_property, f"median slope={slope:.3f} time={elapsed:.0f}s")
    assert elapsed < 1200
    assert 0.4 <= slope <= 0.8


# --- C6, C7 ----------------------------------------------------------------------------------------

def test_c6_transfer_benefit(record_property, transfer_battery):
    tag(record_property, 6, "median paired regret ratio tight/single <= 0.7")
    doc, out, elapsed = transfer_battery
    paired = doc["paired_ratio_tight_over_single"]
    measured(record_property, f"paired median ratio={paired:.3f} "
                              f"ratio of medians={doc['ratio_tight_over_single']:.3f} "
                              f"time={elapsed:.0f}s")
    assert verify_summary(out)
    assert elapsed < 1800
    assert paired <= 0.7


def test_c7_naive_vs_tight(record_property, transfer_battery):
    tag(record_property, 7, "tight median regret <= naive; logged dominance holds")
    doc, out, _ = transfer_battery
    med = doc["median_regret"]
    runs = [r["variants"]["transfer-tight"] for r in doc["runs"]]
    checked = sum(r["dominance_checked"] for r in runs)
    worst = max(r["max_dominance_violation"] for r in runs)
    full_checked = sum(r["full_dominance_checked"] for r in runs)
    full_worst = max(r["max_full_dominance_violation"] for r in runs)
    measured(record_property,
             f"tight={med['transfer-tight']:.3f} naive={med['transfer-naive']:.3f} "
             f"hypothesis rows={checked} worst={worst:.3g} "
             f"corrected rows={full_checked} worst={full_worst:.3g}")
    assert worst <= 1e-12 and full_worst <= 1e-12
    assert med["transfer-tight"] <= med["transfer-naive"]


# --- C8 ----------------------------------------------------------------------------------------

def test_c8_bonus_oracle(record_property):
    tag(record_property, 8, "closed-form bonus dominates 1e4 directions and is attained")
    t0 = time.perf_counter()
    worst_dom, worst_att = -math.inf, 0.0
    for k in range(20):
        m = make_mdp(seed=k, mode="feature-transform" if k % 2 else "canonical-one-hot",
                     n_states=4 + k % 3)
        out = bonus_oracle_probe(m, np.random.default_rng(1000 + k), n_dirs=10_000,
                                 beta=float(np.random.default_rng(k).uniform(0.01, 2.0)))
        worst_dom = max(worst_dom, out["max_sampled_minus_bonus"])
        worst_att = max(worst_att, abs(out["attained_minus_bonus"]))
    elapsed = time.perf_counter() - t0
    measured(record_property, f"max sampled-bonus={worst_dom:.3g} "
                              f"|attained-bonus|={worst_att:.2e} time={elapsed:.1f}s")
    assert worst_dom <= 0.0 and worst_att <= 1e-10
    assert elapsed < 60


# --- C9 ----------------------------------------------------------------------------------------

IDENT = dict(n_states=20, n_actions=3, rank_r=1, sparsity_s=4, diff_sparsity_e=2,
             dirichlet_alpha=10.0, perturb_magnitude=0.02)


def test_c9_noiseless_recovery(record_property):
    tag(record_property, 9, "noiseless recovery of (L*, S*, D*) to 1e-6 on 20 instances")
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        # no override: these instances satisfy the sufficient-sparsity condition
        pair = generate_task_pair(GenConfig(**IDENT, seed=seed))
        src, tgt = pair.source, pair.target
        X = np.tile(src.features.phi, (4, 1))
        cons = LrsConstraints(src.rank_r, 10.0, src.sparsity_s, src.p, src.q)
        fit = fit_low_rank_sparse(RegressionData(X, X @ src.core), cons)
        D = fit_sparse_difference(RegressionData(X, X @ tgt.core), fit.l_hat + fit.s_hat, pair.e)
        errs = (np.linalg.norm(fit.l_hat - src.core_low_rank),
                np.linalg.norm(fit.s_hat - src.core_sparse),
                np.linalg.norm(D - pair.diff))
        worst = max(worst, *errs)
    elapsed = time.perf_counter() - t0
    measured(record_property, f"max Frobenius error={worst:.2e} time={elapsed:.1f}s")
    assert worst <= 1e-6
    assert elapsed < 300


# --- C10 ----------------------------------------------------------------------------------------

def test_c10_dp_oracle(record_property, reference_runs_2000, transfer_battery, sweep_battery):
    tag(record_property, 10, "DP equals exhaustive enumeration; no negative regret in any trace")
    t0 = time.perf_counter()
    shapes = [(3, 2, 2), (4, 2, 3), (3, 3, 3), (5, 2, 3), (4, 3, 2), (2, 4, 4)]
    n_instances = 0
    for k, (ns, na, H) in enumerate(shapes):
        for mode in ("canonical-one-hot", "feature-transform"):
            m = make_mdp(n_states=ns, n_actions=na, horizon=H, rank_r=1, sparsity_s=2,
                         seed=k, mode=mode)
            assert n_deterministic_policies(m) <= 100_000
            best, best_mean = brute_force_optimum(m)
            t = solve_optimal(m)
            np.testing.assert_array_equal(t.v_star[0], best)
            assert float(m.initial_dist @ t.v_star[0]) == best_mean
            n_instances += 1
    elapsed = time.perf_counter() - t0
    # every trace produced in this session
    lows = [min(r.trace.per_episode) for r in reference_runs_2000[0]]
    for _, out, _ in (transfer_battery, sweep_battery):
        for path in Path(out).glob("*.csv"):
            if path.name == "sweep.csv":
                continue
            lows.append(float(read_trace_csv(path)["per_episode_regret"].min()))
    measured(record_property, f"instances={n_instances} traces={len(lows)} "
                              f"min per-episode regret={min(lows):.3g} time={elapsed:.1f}s")
    assert min(lows) >= -1e-10
    assert elapsed < 60


# --- C11 ----------------------------------------------------------------------------------------

def test_c11_phase_transition(record_property, sweep_battery):
    tag(record_property, 11, "median regret nonincreasing in N0, flat final segment")
    doc, out, elapsed = sweep_battery
    rows = [r for r in doc["table"] if r["variant"] == "transfer-tight"]
    n0 = [r["n0"] for r in rows]
    med = [r["median_regret"] for r in rows]
    final = loglog_fit(n0[-2:], med[-2:]).slope
    measured(record_property, "medians=" + ", ".join(f"{a:g}:{b:.3f}" for a, b in zip(n0, med))
             + f" final slope={final:.3f} time={elapsed:.0f}s")
    assert verify_summary(out)
    assert elapsed < 2400
    assert all(b <= a for a, b in zip(med, med[1:]))
    assert abs(final) <= 0.1
