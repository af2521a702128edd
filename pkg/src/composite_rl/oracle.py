"""Exact dynamic programming on the true kernel: optimal values, policy values, regret.

Steps are 0-based: ``v[h]`` for ``h < H`` and ``v[H] = 0``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

from .mdp import CompositeMdp

VALUES_SCHEMA = "values/v1"
REGRET_FLOOR = -1e-10


@dataclass(frozen=True)
class ValueTables:
    v_star: np.ndarray     # (H + 1, S)
    q_star: np.ndarray     # (H, S, A)

    @property
    def greedy_policy(self):
        return np.argmax(self.q_star, axis=2)

    def to_dict(self):
        return {"schema": VALUES_SCHEMA, "v_star": self.v_star.tolist(),
                "q_star": self.q_star.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, doc):
        if doc.get("schema") != VALUES_SCHEMA:
            raise ValueError(f"expected schema {VALUES_SCHEMA!r}")
        return cls(np.asarray(doc["v_star"], float), np.asarray(doc["q_star"], float))


def _reward(mdp, reward=None):
    r = mdp.reward if reward is None else np.asarray(reward, float)
    return r.reshape(mdp.n_states, mdp.n_actions)


def solve_optimal(mdp: CompositeMdp, reward=None) -> ValueTables:
    H, ns, na = mdp.horizon, mdp.n_states, mdp.n_actions
    P, R = mdp.kernel, _reward(mdp, reward)
    v = np.zeros((H + 1, ns))
    q = np.zeros((H, ns, na))
    for h in range(H - 1, -1, -1):
        q[h] = R + P @ v[h + 1]
        v[h] = q[h].max(axis=1)
    return ValueTables(v, q)


def _as_distribution(policy, H, ns, na):
    policy = np.asarray(policy)
    if policy.ndim == 3:
        if policy.shape != (H, ns, na):
            raise ValueError(f"stochastic policy must have shape {(H, ns, na)}")
        return policy.astype(float)
    if policy.shape != (H, ns):
        raise ValueError(f"deterministic policy must have shape {(H, ns)}")
    if policy.min() < 0 or policy.max() >= na:
        raise ValueError("policy action out of range")
    return np.eye(na)[policy.astype(np.int64)]


def policy_values(mdp: CompositeMdp, policy, reward=None) -> np.ndarray:
    """Per-step values ``V^pi_h(s)`` of a deterministic (H, S) or stochastic (H, S, A) policy."""
    H, ns, na = mdp.horizon, mdp.n_states, mdp.n_actions
    pi = _as_distribution(policy, H, ns, na)
    P, R = mdp.kernel, _reward(mdp, reward)
    v = np.zeros((H + 1, ns))
    for h in range(H - 1, -1, -1):
        v[h] = np.sum(pi[h] * (R + P @ v[h + 1]), axis=1)
    return v


def evaluate_policy(mdp: CompositeMdp, policy, reward=None):
    """Return ``(V^pi_1, E_mu[V^pi_1])``."""
    v = policy_values(mdp, policy, reward)
    return v[0], float(mdp.initial_dist @ v[0])


def optimal_value(mdp: CompositeMdp, tables: ValueTables | None = None) -> float:
    tables = tables or solve_optimal(mdp)
    return float(mdp.initial_dist @ tables.v_star[0])


def episode_regret(mdp: CompositeMdp, policy, tables: ValueTables | None = None) -> float:
    return optimal_value(mdp, tables) - evaluate_policy(mdp, policy)[1]


def uniform_policy(mdp: CompositeMdp) -> np.ndarray:
    na = mdp.n_actions
    return np.full((mdp.horizon, mdp.n_states, na), 1.0 / na)


def n_deterministic_policies(mdp: CompositeMdp) -> int:
    return mdp.n_actions ** (mdp.n_states * mdp.horizon)


def enumerate_policies(mdp: CompositeMdp, limit=100_000):
    """Yield every deterministic nonstationary policy as an (H, S) table."""
    if n_deterministic_policies(mdp) > limit:
        raise ValueError(f"more than {limit} deterministic policies")
    H, ns = mdp.horizon, mdp.n_states
    for combo in itertools.product(range(mdp.n_actions), repeat=H * ns):
        yield np.asarray(combo, dtype=np.int64).reshape(H, ns)


def brute_force_optimum(mdp: CompositeMdp, limit=100_000):
    """Max over enumerated policies of the per-state initial value (optimal per state)."""
    best = np.full(mdp.n_states, -np.inf)
    best_mean = -np.inf
    for pi in enumerate_policies(mdp, limit):
        v0 = policy_values(mdp, pi)[0]
        best = np.maximum(best, v0)
        best_mean = max(best_mean, float(mdp.initial_dist @ v0))
    return best, best_mean


@dataclass
class RegretTrace:
    optimal_value: float
    episodes: list = field(default_factory=list)
    policy_values: list = field(default_factory=list)
    per_episode: list = field(default_factory=list)
    cumulative: list = field(default_factory=list)

    def append(self, episode, policy_value):
        gap = self.optimal_value - policy_value
        if gap < REGRET_FLOOR:
            raise AssertionError(f"negative regret {gap:.3g} at episode {episode}")
        self.episodes.append(int(episode))
        self.policy_values.append(float(policy_value))
        self.per_episode.append(float(gap))
        prev = self.cumulative[-1] if self.cumulative else 0.0
        self.cumulative.append(prev + float(gap))
        return gap

    @property
    def total(self):
        return self.cumulative[-1] if self.cumulative else 0.0

    def __len__(self):
        return len(self.per_episode)

    def check(self, tol=1e-12):
        pre = np.cumsum(self.per_episode)
        return bool(np.all(np.abs(pre - np.asarray(self.cumulative)) <= tol * np.maximum(1, pre))
                    and min(self.per_episode, default=0.0) >= REGRET_FLOOR)
