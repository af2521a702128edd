"""Composite episodic MDPs: feature tables, exact kernels, sampling, regression rows.

State-action pairs are flattened row-major, ``sa = s * n_actions + a``, and steps
are 0-based internally (step ``h`` in ``range(horizon)``).
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from ._validation import check_finite, check_index
from .exceptions import SingularKernelError, StructuralViolation

SCHEMA = "composite-mdp/v1"

NEG_TOL = 1e-9
ROWSUM_TOL = 1e-6
DRIFT_TOL = 1e-12
COND_CAP = 1e10


@dataclass(frozen=True)
class FeatureTables:
    phi: np.ndarray
    psi: np.ndarray
    k_psi: np.ndarray
    k_psi_inv: np.ndarray
    ridge_used: float = 0.0

    @classmethod
    def from_features(cls, phi, psi, cond_cap=COND_CAP, allow_ridge=True):
        """Build tables, adding a small ridge to ``psi.T @ psi`` if it is near-singular."""
        phi = check_finite(np.atleast_2d(np.asarray(phi, dtype=float)), "phi")
        psi = check_finite(np.atleast_2d(np.asarray(psi, dtype=float)), "psi")
        q = psi.shape[1]
        k_psi = psi.T @ psi
        ridge = 0.0
        cond = np.linalg.cond(k_psi)
        if not np.isfinite(cond) or cond > cond_cap:
            if not allow_ridge:
                raise SingularKernelError(
                    f"K_psi condition number {cond:.3g} exceeds cap {cond_cap:.3g}")
            ridge = 1e-8 * np.trace(k_psi) / q
            if ridge <= 0:
                raise SingularKernelError("K_psi is zero")
            k_psi = k_psi + ridge * np.eye(q)
            warnings.warn(f"K_psi near-singular (cond={cond:.3g}); ridge {ridge:.3g} added",
                          RuntimeWarning, stacklevel=2)
        return cls(phi, psi, k_psi, np.linalg.inv(k_psi), ridge)

    @property
    def p(self) -> int:
        return self.phi.shape[1]

    @property
    def q(self) -> int:
        return self.psi.shape[1]

    @cached_property
    def psi_targets(self) -> np.ndarray:
        """Row ``s'`` holds the regression target ``psi(s')^T K_psi^{-1}``."""
        return self.psi @ self.k_psi_inv


@dataclass(frozen=True)
class TransitionSample:
    state: int
    action: int
    next_state: int
    step: int
    episode: int = 0


@dataclass(frozen=True)
class RegularityConstants:
    c_phi: float
    c_phi_prime: float
    c_psi: float
    c_psi_prime: float
    c_phipsi: float

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in
                ("c_phi", "c_phi_prime", "c_psi", "c_psi_prime", "c_phipsi")}


@dataclass(frozen=True, eq=False)
class CompositeMdp:
    n_states: int
    n_actions: int
    horizon: int
    features: FeatureTables
    core_low_rank: np.ndarray
    core_sparse: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    rank_r: int
    sparsity_s: int
    incoherence_mu: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        ns, na = self.n_states, self.n_actions
        if self.features.phi.shape[0] != ns * na:
            raise ValueError(f"phi must have {ns * na} rows, got {self.features.phi.shape[0]}")
        if self.features.psi.shape[0] != ns:
            raise ValueError(f"psi must have {ns} rows, got {self.features.psi.shape[0]}")
        shape = (self.features.p, self.features.q)
        if self.core_low_rank.shape != shape or self.core_sparse.shape != shape:
            raise ValueError(f"core matrices must have shape {shape}")
        if self.reward.shape != (ns * na,):
            raise ValueError("reward must be a flat (|S|*|A|,) vector")
        if np.any(self.reward < 0) or np.any(self.reward > 1):
            raise ValueError("rewards must lie in [0, 1]")
        mu = self.initial_dist
        if mu.shape != (ns,) or np.any(mu < 0) or abs(mu.sum() - 1) > 1e-12:
            raise ValueError("initial_dist must be a probability vector over states")

    @property
    def core(self) -> np.ndarray:
        return self.core_low_rank + self.core_sparse

    @property
    def p(self) -> int:
        return self.features.p

    @property
    def q(self) -> int:
        return self.features.q

    @cached_property
    def raw_kernel(self) -> np.ndarray:
        """Unclipped ``phi(s,a)^T M psi(s')`` as an (|S|*|A|, |S|) array."""
        return self.features.phi @ self.core @ self.features.psi.T

    @cached_property
    def kernel(self) -> np.ndarray:
        """Validated transition tensor of shape (|S|, |A|, |S|)."""
        rows = np.vstack([_clean_row(row) for row in self.raw_kernel])
        return rows.reshape(self.n_states, self.n_actions, self.n_states)

    @cached_property
    def reward_table(self) -> np.ndarray:
        return self.reward.reshape(self.n_states, self.n_actions)

    def validate(self, rank_tol=1e-8):
        """Check the kernel and structural declarations; raise on violation."""
        raw = self.raw_kernel
        if raw.min() < -1e-12:
            raise StructuralViolation(f"negative transition probability {raw.min():.3g}")
        dev = np.abs(raw.sum(axis=1) - 1).max()
        if dev > 1e-9:
            raise StructuralViolation(f"row sums deviate from 1 by {dev:.3g}")
        if numerical_rank(self.core_low_rank, rank_tol) > self.rank_r:
            raise StructuralViolation("low-rank core exceeds declared rank")
        if np.count_nonzero(self.core_sparse) > self.sparsity_s:
            raise StructuralViolation("sparse core exceeds declared sparsity")
        return self


def numerical_rank(a, tol=1e-8):
    sv = np.linalg.svd(a, compute_uv=False)
    if sv.size == 0 or sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * max(1.0, sv[0])))


def _clean_row(raw):
    if raw.min() < -NEG_TOL or abs(raw.sum() - 1) > ROWSUM_TOL:
        raise StructuralViolation(
            f"transition row invalid (min={raw.min():.3g}, sum={raw.sum():.6g})")
    v = np.clip(raw, 0.0, 1.0)
    total = v.sum()
    if abs(total - 1) > DRIFT_TOL:
        v = v / total
    return v


def transition_prob(mdp: CompositeMdp, s: int, a: int) -> np.ndarray:
    check_index(s, mdp.n_states, "state")
    check_index(a, mdp.n_actions, "action")
    return mdp.kernel[s, a].copy()


PolicyLike = Callable[[int, int], int] | np.ndarray


def _action(policy, h, s, rng):
    if callable(policy):
        return int(policy(h, s))
    policy = np.asarray(policy)
    if policy.ndim == 3:
        return int(rng.choice(policy.shape[2], p=policy[h, s]))
    return int(policy[h, s])


def sample_episode(mdp: CompositeMdp, policy: PolicyLike, rng: np.random.Generator,
                   episode: int = 0) -> list[TransitionSample]:
    """Roll out one episode; ``policy`` is ``f(h, s) -> a``, an (H, S) action table,
    or an (H, S, A) table of action probabilities."""
    cdf = np.cumsum(mdp.kernel, axis=2)
    s = _draw(np.cumsum(mdp.initial_dist), rng.random())
    out = []
    for h in range(mdp.horizon):
        a = _action(policy, h, s, rng)
        check_index(a, mdp.n_actions, "action")
        s_next = _draw(cdf[s, a], rng.random())
        out.append(TransitionSample(s, a, s_next, h, episode))
        s = s_next
    return out


def _draw(cdf, u):
    return int(min(np.searchsorted(cdf, u, side="right"), cdf.size - 1))


def sample_episodes(mdp: CompositeMdp, n_episodes: int, rng: np.random.Generator,
                    policy: np.ndarray | None = None):
    """Vectorised rollouts under a fixed policy (uniform-random when ``policy`` is None).

    Returns integer arrays ``states, actions, next_states`` of shape (n_episodes, H).
    """
    ns, na, H = mdp.n_states, mdp.n_actions, mdp.horizon
    cdf = np.cumsum(mdp.kernel, axis=2).reshape(ns * na, ns)
    states = np.empty((n_episodes, H), dtype=np.int64)
    actions = np.empty_like(states)
    s = np.minimum(np.searchsorted(np.cumsum(mdp.initial_dist), rng.random(n_episodes),
                                   side="right"), ns - 1)
    for h in range(H):
        if policy is None:
            a = rng.integers(0, na, size=n_episodes)
        elif policy.ndim == 3:
            pcdf = np.cumsum(policy[h, s], axis=1)
            a = np.minimum((pcdf < rng.random(n_episodes)[:, None]).sum(axis=1), na - 1)
        else:
            a = policy[h, s]
        states[:, h], actions[:, h] = s, a
        rows = cdf[s * na + a]
        s = np.minimum((rows <= rng.random(n_episodes)[:, None]).sum(axis=1), ns - 1)
        if h + 1 < H:
            states[:, h + 1] = s
    next_states = np.empty_like(states)
    next_states[:, :-1] = states[:, 1:]
    next_states[:, -1] = s
    return states, actions, next_states


def regression_row(features: FeatureTables, sample: TransitionSample, n_actions: int):
    """Return ``(phi(s,a), psi(s')^T K_psi^{-1})`` for one transition."""
    x = features.phi[sample.state * n_actions + sample.action]
    y = features.psi_targets[sample.next_state]
    return x.copy(), y.copy()


def regression_rows(features: FeatureTables, states, actions, next_states, n_actions: int):
    states, actions, next_states = (np.ravel(np.asarray(v)) for v in
                                    (states, actions, next_states))
    return (features.phi[states * n_actions + actions],
            features.psi_targets[next_states])


def compute_regularity(mdp_or_features) -> RegularityConstants:
    feats = getattr(mdp_or_features, "features", mdp_or_features)
    phi, psi = feats.phi, feats.psi
    phi_l2 = np.linalg.norm(phi, axis=1)
    phi_inf = np.abs(phi).max(axis=1)
    targets = feats.psi_targets
    # l_inf -> l_2 norm of Psi^T: exact value is combinatorial, take the smaller valid bound
    c_psi = min(np.linalg.norm(psi, axis=1).sum(),
                np.linalg.norm(psi, 2) * np.sqrt(psi.shape[0]))
    consts = RegularityConstants(
        c_phi=float(phi_l2.max()),
        c_phi_prime=float(phi_inf.max()),
        c_psi=float(c_psi),
        c_psi_prime=float(np.linalg.norm(targets, axis=1).max()),
        c_phipsi=float(phi_inf.max() * np.abs(targets).max()),
    )
    if not all(np.isfinite(v) and v > 0 for v in consts.as_dict().values()):
        raise ValueError(f"regularity constants must be positive and finite: {consts}")
    return consts


# --- composite-mdp/v1 serialisation -------------------------------------------

def _coo(mat):
    rows, cols = np.nonzero(mat)
    return [[int(i), int(j), float(mat[i, j])] for i, j in zip(rows, cols)]


def _from_coo(entries, shape):
    out = np.zeros(shape)
    for i, j, v in entries:
        out[int(i), int(j)] = v
    return out


def mdp_to_dict(mdp: CompositeMdp) -> dict:
    f = mdp.features
    return {
        "schema": SCHEMA,
        "n_states": mdp.n_states,
        "n_actions": mdp.n_actions,
        "horizon": mdp.horizon,
        "p": f.p,
        "q": f.q,
        "phi": f.phi.tolist(),
        "psi": f.psi.tolist(),
        "core_low_rank": mdp.core_low_rank.tolist(),
        "core_sparse": _coo(mdp.core_sparse),
        "reward": mdp.reward.tolist(),
        "initial_dist": mdp.initial_dist.tolist(),
        "rank_r": mdp.rank_r,
        "sparsity_s": mdp.sparsity_s,
        "incoherence_mu": float(mdp.incoherence_mu),
        "metadata": mdp.metadata,
    }


def mdp_from_dict(doc: dict) -> CompositeMdp:
    if doc.get("schema") != SCHEMA:
        raise ValueError(f"expected schema {SCHEMA!r}, got {doc.get('schema')!r}")
    p, q = int(doc["p"]), int(doc["q"])
    features = FeatureTables.from_features(np.array(doc["phi"]), np.array(doc["psi"]))
    return CompositeMdp(
        n_states=int(doc["n_states"]),
        n_actions=int(doc["n_actions"]),
        horizon=int(doc["horizon"]),
        features=features,
        core_low_rank=np.array(doc["core_low_rank"], dtype=float).reshape(p, q),
        core_sparse=_from_coo(doc["core_sparse"], (p, q)),
        reward=np.array(doc["reward"], dtype=float),
        initial_dist=np.array(doc["initial_dist"], dtype=float),
        rank_r=int(doc["rank_r"]),
        sparsity_s=int(doc["sparsity_s"]),
        incoherence_mu=float(doc["incoherence_mu"]),
        metadata=dict(doc.get("metadata", {})),
    )


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=1) + "\n"


def save_mdp(mdp: CompositeMdp, path):
    with open(path, "w") as fh:
        fh.write(dumps(mdp_to_dict(mdp)))


def load_mdp(path) -> CompositeMdp:
    with open(path) as fh:
        return mdp_from_dict(json.load(fh))


def canonical_features(n_states: int, n_actions: int) -> FeatureTables:
    """One-hot features: phi indexes (s, a) pairs, psi indexes next states."""
    return FeatureTables.from_features(np.eye(n_states * n_actions), np.eye(n_states))


def policy_from_table(table: Sequence) -> Callable[[int, int], int]:
    table = np.asarray(table)
    return lambda h, s: int(table[h, s])
