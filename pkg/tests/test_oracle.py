import numpy as np
import pytest

from composite_rl.mdp import CompositeMdp, canonical_features, sample_episodes
from composite_rl.oracle import (REGRET_FLOOR, RegretTrace, ValueTables, brute_force_optimum,
                                 enumerate_policies, episode_regret, evaluate_policy,
                                 n_deterministic_policies, policy_values, solve_optimal,
                                 uniform_policy)

from conftest import make_mdp


def tabular(P, reward, horizon, mu0=None):
    P = np.asarray(P, float)
    sa, ns = P.shape
    mu0 = np.full(ns, 1.0 / ns) if mu0 is None else mu0
    return CompositeMdp(ns, sa // ns, horizon, canonical_features(ns, sa // ns), P,
                        np.zeros_like(P), np.asarray(reward, float), mu0, min(P.shape), 0, 1.0)


def test_horizon_one_is_reward_table(rng):
    m = make_mdp(horizon=1, seed=3)
    t = solve_optimal(m)
    np.testing.assert_array_equal(t.q_star[0], m.reward_table)
    np.testing.assert_array_equal(t.v_star[0], m.reward_table.max(axis=1))
    assert not t.v_star[1].any()


def test_matches_exhaustive_enumeration():
    m = make_mdp(n_states=3, n_actions=2, horizon=2, rank_r=1, sparsity_s=2, seed=1)
    assert n_deterministic_policies(m) == 64
    assert sum(1 for _ in enumerate_policies(m)) == 64
    best, best_mean = brute_force_optimum(m)
    t = solve_optimal(m)
    np.testing.assert_allclose(t.v_star[0], best, atol=1e-14)
    assert float(m.initial_dist @ t.v_star[0]) == pytest.approx(best_mean, abs=1e-14)


def test_uniform_kernel_constant_reward_closed_form():
    ns, na, H, c = 4, 3, 6, 0.37
    m = tabular(np.full((ns * na, ns), 1 / ns), np.full(ns * na, c), H)
    t = solve_optimal(m)
    for h in range(H + 1):
        np.testing.assert_allclose(t.v_star[h], c * (H - h), rtol=1e-14)


def test_greedy_policy_attains_v_star(small_mdp):
    t = solve_optimal(small_mdp)
    v = policy_values(small_mdp, t.greedy_policy)
    assert np.abs(v - t.v_star).max() <= 1e-12
    assert episode_regret(small_mdp, t.greedy_policy, t) == 0.0


def test_single_action_mdp_has_one_value(rng):
    m = tabular(rng.dirichlet(np.ones(3), size=3), rng.uniform(size=3), 4)
    t = solve_optimal(m)
    pol = np.zeros((4, 3), dtype=int)
    np.testing.assert_allclose(policy_values(m, pol), t.v_star, atol=0)
    np.testing.assert_allclose(policy_values(m, uniform_policy(m)), t.v_star, atol=1e-15)
    assert episode_regret(m, pol) == 0.0


def test_stochastic_policy_is_mixture(small_mdp, rng):
    m = small_mdp
    a = rng.integers(0, 2, size=(m.horizon, m.n_states))
    b = a.copy()
    b[-1] = 1 - a[-1]
    # randomising only the last step averages the two deterministic values
    mixed = 0.5 * np.eye(2)[a] + 0.5 * np.eye(2)[b]
    np.testing.assert_allclose(policy_values(m, mixed),
                               0.5 * (policy_values(m, a) + policy_values(m, b)), atol=1e-14)


def test_values_linear_in_reward(small_mdp, rng):
    m = small_mdp
    pol = uniform_policy(m)
    r1, r2 = rng.uniform(size=m.p), rng.uniform(size=m.p)
    v1 = policy_values(m, pol, r1)
    v2 = policy_values(m, pol, r2)
    np.testing.assert_allclose(policy_values(m, pol, 0.3 * r1 + 0.7 * r2),
                               0.3 * v1 + 0.7 * v2, atol=1e-14)


def test_uniform_policy_matches_monte_carlo(small_mdp):
    m = small_mdp
    _, exact = evaluate_policy(m, uniform_policy(m))
    rng = np.random.default_rng(2024)
    returns = []
    for _ in range(4):
        st, ac, _ = sample_episodes(m, 250_000, rng)
        returns.append(m.reward[st * m.n_actions + ac].sum(axis=1))
    g = np.concatenate(returns)
    se = g.std(ddof=1) / np.sqrt(g.size)
    assert abs(g.mean() - exact) <= 3 * se
    regret = episode_regret(m, uniform_policy(m))
    assert regret == pytest.approx(float(m.initial_dist @ solve_optimal(m).v_star[0]) - exact)


def test_policy_shape_checks(small_mdp):
    with pytest.raises(ValueError):
        policy_values(small_mdp, np.zeros((2, 2), int))
    with pytest.raises(ValueError):
        policy_values(small_mdp, np.full((small_mdp.horizon, small_mdp.n_states), 5))


def test_enumeration_limit():
    m = make_mdp(seed=0)
    with pytest.raises(ValueError):
        next(enumerate_policies(m))


def test_value_tables_round_trip(small_mdp):
    t = solve_optimal(small_mdp)
    back = ValueTables.from_dict(t.to_dict())
    np.testing.assert_array_equal(back.q_star, t.q_star)
    with pytest.raises(ValueError):
        ValueTables.from_dict({"schema": "x"})


def test_regret_trace_invariants():
    tr = RegretTrace(2.0)
    for n, v in enumerate([1.5, 2.0, 1.0], start=1):
        tr.append(n, v)
    assert tr.per_episode == [0.5, 0.0, 1.0]
    assert tr.cumulative == [0.5, 0.5, 1.5]
    assert tr.total == 1.5 and len(tr) == 3 and tr.check()
    tr.append(4, 2.0 + 0.5 * abs(REGRET_FLOOR))
    with pytest.raises(AssertionError):
        tr.append(5, 2.0 + 1e-9)
