import time
import warnings

import numpy as np
import pytest

from composite_rl.generate import GenConfig, generate_mdp, generate_task_pair

# criterion id -> (description, measured values, outcome); filled in by tests/test_acceptance.py
ACCEPTANCE_RESULTS = {}


def make_mdp(**kw):
    """Generated instance; assumption violations only warn."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return generate_mdp(GenConfig(**kw), override_assumptions=True)


def make_pair(**kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return generate_task_pair(GenConfig(**kw), override_assumptions=True)


REFERENCE = dict(n_states=6, n_actions=3, horizon=5, rank_r=2, sparsity_s=6)
REFERENCE_SEEDS = range(10)


def _reference_run(seed, n_episodes):
    from composite_rl.agents import run_ucb_q
    from composite_rl.harness import agent_rng
    mdp = make_mdp(**REFERENCE, seed=seed)
    return run_ucb_q(mdp, n_episodes, rng=agent_rng(seed, "target"))


@pytest.fixture(scope="session")
def reference_runs_2000():
    """UCB-Q on the reference battery, 2000 episodes, 10 seeds (shared by several checks)."""
    t0 = time.perf_counter()
    runs = [_reference_run(seed, 2000) for seed in REFERENCE_SEEDS]
    return runs, time.perf_counter() - t0


@pytest.fixture
def small_mdp():
    return make_mdp(n_states=4, n_actions=2, horizon=3, rank_r=2, sparsity_s=2, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    crit = props.get("criterion")
    if crit is None:
        return
    ACCEPTANCE_RESULTS[crit] = (props.get("description", ""), props.get("measured", ""),
                                "PASS" if report.passed else "FAIL")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(ACCEPTANCE_RESULTS):
        desc, value, outcome = ACCEPTANCE_RESULTS[crit]
        terminalreporter.write_line(f"C{crit:<2d} {outcome}  {desc}  [{value}]")
