"""Hard-constrained least squares for ``Y ~ X (L + S)`` and ``Y ~ X (base + D)``.

``L`` is rank-``r`` with incoherent singular vectors and ``S``/``D`` are entrywise
sparse.  Both solvers work on sufficient statistics (``X^T X``, ``X^T Y``,
``||Y||^2``) so a refit costs the same regardless of how many rows were seen.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted

from ._validation import check_core, check_design

ESTIMATOR_SCHEMA = "estimator/v1"
MAX_BACKTRACKS = 40
MONOTONE_SLACK = 1e-12


# --- data containers ----------------------------------------------------------

@dataclass
class RegressionData:
    x_rows: np.ndarray
    y_rows: np.ndarray
    horizon: int = 1

    def __post_init__(self):
        self.x_rows, self.y_rows = check_design(self.x_rows, self.y_rows)

    @property
    def n_obs(self):
        return self.x_rows.shape[0]

    @property
    def n_episodes(self):
        return self.n_obs // self.horizon

    def gram(self):
        return GramStats.from_rows(self.x_rows, self.y_rows, self.horizon)


@dataclass
class GramStats:
    """Unnormalised sufficient statistics of a regression data set."""
    xx: np.ndarray
    xy: np.ndarray
    yy: float
    n_obs: int
    horizon: int = 1

    @classmethod
    def empty(cls, p, q, horizon=1):
        return cls(np.zeros((p, p)), np.zeros((p, q)), 0.0, 0, horizon)

    @classmethod
    def from_rows(cls, X, Y, horizon=1):
        return cls(X.T @ X, X.T @ Y, float(np.sum(Y * Y)), X.shape[0], horizon)

    def add(self, X, Y):
        self.xx += X.T @ X
        self.xy += X.T @ Y
        self.yy += float(np.sum(Y * Y))
        self.n_obs += X.shape[0]
        return self

    @property
    def n_episodes(self):
        return self.n_obs // max(self.horizon, 1)

    def normalised(self):
        n = max(self.n_obs, 1)
        return self.xx / n, self.xy / n, self.yy / n


@dataclass(frozen=True)
class LrsConstraints:
    rank_r: int
    mu_budget: float
    sparsity_cap: int
    p: int
    q: int

    def __post_init__(self):
        if self.rank_r < 1:
            raise ValueError("rank_r must be >= 1")
        if self.sparsity_cap < 0:
            raise ValueError("sparsity_cap must be >= 0")


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-8
    max_iters: int = 500
    lambda_floor: float = 1e-8
    ridge: float = 1e-10
    precondition: bool = True
    multi_start: bool = True

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: v for k, v in (d or {}).items() if k in cls.__dataclass_fields__})


@dataclass
class EstimatorState:
    l_hat: np.ndarray
    s_hat: np.ndarray
    d_hat: np.ndarray | None = None
    objective: float = 0.0
    iterations: int = 0
    converged: bool = True
    lambda_min_design: float = 0.0
    objective_path: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def core(self):
        out = self.l_hat + self.s_hat
        return out if self.d_hat is None else out + self.d_hat

    def to_dict(self):
        def coo(m):
            i, j = np.nonzero(m)
            return [[int(a), int(b), float(m[a, b])] for a, b in zip(i, j)]
        return {
            "schema": ESTIMATOR_SCHEMA,
            "shape": list(self.l_hat.shape),
            "l_hat": self.l_hat.tolist(),
            "s_hat": coo(self.s_hat),
            "d_hat": None if self.d_hat is None else coo(self.d_hat),
            "objective": float(self.objective),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "lambda_min_design": float(self.lambda_min_design),
            "warnings": list(self.warnings),
        }

    def to_json(self):
        return json.dumps(self.to_dict())


# --- projections ----------------------------------------------------------------

def hard_threshold(Z, k):
    """Keep the ``k`` largest-magnitude entries; ties resolve in row-major order."""
    out = np.zeros_like(Z)
    if k <= 0:
        return out
    flat = Z.ravel()
    order = np.argsort(-np.abs(flat), kind="stable")[:k]
    order = order[flat[order] != 0]
    out.ravel()[order] = flat[order]
    return out


def _clip_rows(F, budget):
    norms = np.linalg.norm(F, axis=1)
    scale = np.where(norms > budget, budget / np.maximum(norms, 1e-300), 1.0)
    return F * scale[:, None]


def _incoherent_basis(F, budget, max_rounds=100, margin=0.98):
    """Orthonormal basis close to ``span(F)`` whose rows obey the 2,inf budget, or None.

    Rows are clipped slightly inside the budget so that the QR re-normalisation,
    which can only inflate row norms, usually lands inside it.
    """
    Q = np.linalg.qr(F)[0]
    for _ in range(max_rounds):
        if np.linalg.norm(Q, axis=1).max() <= budget * (1 + 1e-10):
            return Q
        Q = np.linalg.qr(_clip_rows(Q, margin * budget))[0]
    return None


def _refit_core(U, V, G, B, S):
    """Least-squares ``C`` minimising the objective over ``L = U C V^T`` with S fixed."""
    A = U.T @ G @ U
    rhs = U.T @ (B - G @ S) @ V
    C = np.linalg.lstsq(A, rhs, rcond=1e-12)[0]
    return U @ C @ V.T


def project_low_rank(Z, rank, mu_budget, G=None, B=None, S=None):
    """Rank-``rank`` truncation of ``Z`` with incoherence-clipped singular vectors.

    When ``G, B, S`` are given the r x r core is refit by least squares against the
    regression objective; otherwise it is the Frobenius projection ``U^T Z V``.
    Returns None if no budget-feasible basis is found.
    """
    p, q = Z.shape
    U, sv, Vt = np.linalg.svd(Z, full_matrices=False)
    k = int(np.sum(sv > 1e-14 * max(sv[0], 1e-300))) if sv.size else 0
    k = min(rank, k)
    if k == 0:
        return np.zeros_like(Z)
    U, V = U[:, :k], Vt[:k].T
    bu, bv = np.sqrt(mu_budget * rank / p), np.sqrt(mu_budget * rank / q)
    if np.linalg.norm(U, axis=1).max() > bu:
        U = _incoherent_basis(U, bu)
    if U is not None and np.linalg.norm(V, axis=1).max() > bv:
        V = _incoherent_basis(V, bv)
    if U is None or V is None:
        return None
    if G is None:
        return U @ (U.T @ Z @ V) @ V.T
    return _refit_core(U, V, G, B, S)


def singular_row_norms(L, tol=1e-9):
    """Max 2,inf row norms of the left/right singular vectors of ``L``."""
    U, sv, Vt = np.linalg.svd(L, full_matrices=False)
    if sv.size == 0 or sv[0] <= 0:
        return 0.0, 0.0
    k = int(np.sum(sv > tol * sv[0]))
    return (float(np.linalg.norm(U[:, :k], axis=1).max()),
            float(np.linalg.norm(Vt[:k].T, axis=1).max()))


# --- objective -------------------------------------------------------------------

def _refit_support(S, G, R):
    """Least-squares values for ``S`` on its current support, minimising
    ``0.5 tr(S^T G S) - tr(S^T R)`` column by column."""
    out = np.zeros_like(S)
    for j in np.nonzero(np.any(S != 0, axis=0))[0]:
        idx = np.nonzero(S[:, j])[0]
        out[idx, j] = np.linalg.lstsq(G[np.ix_(idx, idx)], R[idx, j], rcond=1e-12)[0]
    return out


def _preconditioner(G, opts):
    """Step metric: ``(G + eps I)^{-1}`` (unit step) or the plain ``1 / lambda_max`` step."""
    p = G.shape[0]
    if opts.precondition:
        eps = max(opts.ridge * float(np.trace(G)), 1e-300)
        return np.linalg.inv(G + eps * np.eye(p)), 1.0
    return np.eye(p), 1.0 / _lambda_max(G)


def _objective(M, G, B, yy):
    return 0.5 * float(np.sum(M * (G @ M))) - float(np.sum(M * B)) + 0.5 * yy


def design_min_eigenvalue(X, n_episodes):
    """Smallest eigenvalue of ``X^T X / (n_episodes - 1)``; tiny round-off reported as 0."""
    X = np.asarray(X, float)
    return _min_eig(X.T @ X, n_episodes)


def _min_eig(xx, n_episodes):
    gram = xx / max(n_episodes - 1, 1)
    lam = float(np.linalg.eigvalsh(gram)[0])
    scale = max(float(np.trace(gram)), 1e-300)
    return 0.0 if lam < 1e-12 * scale else lam


def _lambda_max(G):
    return float(np.linalg.eigvalsh(G)[-1]) if G.size else 0.0


def _take_step(f_cur, current, grad, eta0, project, evaluate):
    """Backtracking projected step; returns (new_point, f_new, accepted)."""
    eta = eta0
    for _ in range(MAX_BACKTRACKS):
        cand = project(current - eta * grad)
        if cand is not None:
            f_new = evaluate(cand)
            if f_new <= f_cur + MONOTONE_SLACK * max(1.0, abs(f_cur)):
                return cand, min(f_new, f_cur), True
        eta *= 0.5
    return current, f_cur, False


def solve_low_rank_sparse(stats: GramStats, cons: LrsConstraints, opts: SolverOptions,
                          init: tuple[np.ndarray, np.ndarray] | None = None) -> EstimatorState:
    """Projected alternating minimisation for the rank/incoherence/sparsity program.

    A cold start (``init=None``) with ``opts.multi_start`` also runs a continuation
    that starts from a looser sparsity cap (3x) and tightens it one entry at a time;
    the lower final objective wins.
    """
    state = _solve_lrs(stats, cons, opts, init)
    cap = cons.sparsity_cap
    if init is not None or not opts.multi_start or cap == 0 or state.iterations == 0:
        return state
    top = min(3 * cap, cons.p * cons.q)
    cur, iters = None, state.iterations
    for k in range(top, cap - 1, -1):
        cur = _solve_lrs(stats, replace(cons, sparsity_cap=k), opts,
                         None if cur is None else (cur.l_hat, cur.s_hat))
        iters += cur.iterations
    best = cur if cur.objective < state.objective else state
    best.iterations = iters
    return best


def _solve_lrs(stats, cons, opts, init):
    p, q = cons.p, cons.q
    G, B, yy = stats.normalised()
    lam_min = _min_eig(stats.xx, stats.n_episodes)
    state_warnings = []
    if lam_min < opts.lambda_floor:
        state_warnings.append(f"design-degenerate: lambda_min={lam_min:.3g}")
    lam_max = _lambda_max(G)
    if stats.n_obs == 0 or lam_max <= 0 or not np.any(B):
        zero = np.zeros((p, q))
        return EstimatorState(zero, zero.copy(), objective=_objective(zero, G, B, yy),
                              iterations=0, converged=True, lambda_min_design=lam_min,
                              objective_path=[0.5 * yy], warnings=state_warnings)

    def proj_l(Z, S):
        return project_low_rank(Z, cons.rank_r, cons.mu_budget, G, B, S)

    if init is None:
        eps = opts.ridge * np.trace(G)
        M0 = np.linalg.solve(G + eps * np.eye(p), B)
        L = proj_l(M0, np.zeros((p, q)))
        if L is None:
            L = np.zeros((p, q))
        S = hard_threshold(M0 - L, cons.sparsity_cap)
    else:
        L, S = (np.array(a, float) for a in init)
        S = hard_threshold(S, cons.sparsity_cap)
        L_feasible = proj_l(L, S) if L.any() else L
        L = L_feasible if L_feasible is not None else np.zeros((p, q))

    def proj_s(Z, L):
        S_new = hard_threshold(Z, cons.sparsity_cap)
        return _refit_support(S_new, G, B - G @ L)

    f = _objective(L + S, G, B, yy)
    path = [f]
    P, eta0 = _preconditioner(G, opts)
    converged = False
    it = 0
    for it in range(1, opts.max_iters + 1):
        f_prev = f
        grad = P @ (G @ (L + S) - B)
        L, f, ok_l = _take_step(f, L, grad, eta0, lambda Z: proj_l(Z, S),
                                lambda Lc: _objective(Lc + S, G, B, yy))
        grad = P @ (G @ (L + S) - B)
        S, f, ok_s = _take_step(f, S, grad, eta0, lambda Z: proj_s(Z, L),
                                lambda Sc: _objective(L + Sc, G, B, yy))
        path.append(f)
        if not (ok_l or ok_s):
            converged = True
            break
        if (f_prev - f) <= opts.tol * max(abs(f_prev), 1e-300):
            converged = True
            break
    if not converged:
        state_warnings.append("not converged")
    return EstimatorState(L, S, objective=f, iterations=it, converged=converged,
                          lambda_min_design=lam_min, objective_path=path,
                          warnings=state_warnings)


def solve_sparse_difference(stats: GramStats, base: np.ndarray, cap_e: int,
                            opts: SolverOptions, init: np.ndarray | None = None):
    """Iterative hard thresholding for ``D`` in ``Y ~ X (base + D)`` with ``||D||_0 <= cap_e``.

    Returns ``(D, objective, iterations, converged)``.
    """
    G, B, yy = stats.normalised()
    base = np.asarray(base, float)
    zero = np.zeros_like(base)
    lam_max = _lambda_max(G)
    if cap_e <= 0 or stats.n_obs == 0 or lam_max <= 0:
        return zero, _objective(base, G, B, yy), 0, True
    # residual statistics: Y - X base
    B_res = B - G @ base
    yy_res = yy - 2 * float(np.sum(base * B)) + float(np.sum(base * (G @ base)))
    D = hard_threshold(np.asarray(init, float), cap_e) if init is not None else zero
    f = _objective(D, G, B_res, yy_res)
    P, eta0 = _preconditioner(G, opts)
    converged, it = False, 0
    for it in range(1, opts.max_iters + 1):
        f_prev = f
        grad = P @ (G @ D - B_res)
        D, f, ok = _take_step(f, D, grad, eta0,
                              lambda Z: _refit_support(hard_threshold(Z, cap_e), G, B_res),
                              lambda Dc: _objective(Dc, G, B_res, yy_res))
        if not ok or (f_prev - f) <= opts.tol * max(abs(f_prev), 1e-300):
            converged = True
            break
    return D, f, it, converged


# --- sklearn-style estimators ----------------------------------------------------------

class LowRankSparseRegression(RegressorMixin, BaseEstimator):
    """Fit ``Y ~ X (L + S)`` with rank/incoherence constraints on L and an l0 cap on S.

    Parameters
    ----------
    rank : int
        Maximum rank of the low-rank component.
    sparsity : int
        Maximum number of nonzeros in the sparse component.
    mu_budget : float
        Incoherence budget; singular-vector rows of L are kept within
        ``sqrt(mu_budget * rank / p)`` (left) and ``sqrt(mu_budget * rank / q)`` (right).
    tol, max_iter : float, int
        Stop when the relative objective decrease falls below ``tol``.
    lambda_floor : float
        Emit a warning if the design's minimum eigenvalue falls below this.
    warm_start : bool
        Start from the previous solution when refitting.
    """

    def __init__(self, rank=1, sparsity=0, mu_budget=np.inf, tol=1e-8, max_iter=500,
                 lambda_floor=1e-8, ridge=1e-10, horizon=1, warm_start=False):
        self.rank = rank
        self.sparsity = sparsity
        self.mu_budget = mu_budget
        self.tol = tol
        self.max_iter = max_iter
        self.lambda_floor = lambda_floor
        self.ridge = ridge
        self.horizon = horizon
        self.warm_start = warm_start

    def _options(self):
        return SolverOptions(self.tol, self.max_iter, self.lambda_floor, self.ridge)

    def fit(self, X, Y):
        X, Y = check_design(X, Y)
        return self.fit_stats(GramStats.from_rows(X, Y, self.horizon))

    def fit_stats(self, stats: GramStats):
        p, q = stats.xy.shape
        cons = LrsConstraints(self.rank, self.mu_budget, self.sparsity, p, q)
        init = None
        if self.warm_start and hasattr(self, "low_rank_") and self.low_rank_.shape == (p, q):
            init = (self.low_rank_, self.sparse_)
        state = solve_low_rank_sparse(stats, cons, self._options(), init)
        for msg in state.warnings:
            if msg.startswith("design-degenerate"):
                warnings.warn(msg, RuntimeWarning, stacklevel=2)
        self.state_ = state
        self.low_rank_ = state.l_hat
        self.sparse_ = state.s_hat
        self.coef_ = state.l_hat + state.s_hat
        self.n_iter_ = state.iterations
        self.converged_ = state.converged
        self.objective_path_ = np.asarray(state.objective_path)
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_


class SparseDifferenceRegression(RegressorMixin, BaseEstimator):
    """Fit the sparse correction ``D`` in ``Y ~ X (base + D)`` by hard thresholding."""

    def __init__(self, base=None, n_nonzero=0, tol=1e-8, max_iter=500, horizon=1,
                 warm_start=False):
        self.base = base
        self.n_nonzero = n_nonzero
        self.tol = tol
        self.max_iter = max_iter
        self.horizon = horizon
        self.warm_start = warm_start

    def fit(self, X, Y):
        X, Y = check_design(X, Y)
        return self.fit_stats(GramStats.from_rows(X, Y, self.horizon))

    def fit_stats(self, stats: GramStats):
        p, q = stats.xy.shape
        base = np.zeros((p, q)) if self.base is None else check_core(self.base, (p, q), "base")
        init = self.diff_ if self.warm_start and hasattr(self, "diff_") else None
        opts = SolverOptions(tol=self.tol, max_iters=self.max_iter)
        D, obj, it, conv = solve_sparse_difference(stats, base, self.n_nonzero, opts, init)
        self.diff_ = D
        self.coef_ = base + D
        self.objective_ = obj
        self.n_iter_ = it
        self.converged_ = conv
        self.n_features_in_ = p
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_


# --- functional entry points ------------------------------------------------------------

def fit_low_rank_sparse(data, cons: LrsConstraints, opts: SolverOptions | None = None,
                        init=None) -> EstimatorState:
    stats = data.gram() if isinstance(data, RegressionData) else data
    return solve_low_rank_sparse(stats, cons, opts or SolverOptions(), init)


def fit_sparse_difference(data, base, cap_e: int, opts: SolverOptions | None = None,
                          init=None) -> np.ndarray:
    stats = data.gram() if isinstance(data, RegressionData) else data
    return solve_sparse_difference(stats, base, cap_e, opts or SolverOptions(), init)[0]


@dataclass(frozen=True)
class ErrorRecord:
    err_l: float
    err_s: float
    err_d: float | None = None

    @property
    def total(self):
        return self.err_l + self.err_s


def estimation_error(state: EstimatorState, l_true, s_true, d_true=None) -> ErrorRecord:
    """Squared Frobenius errors of each component (D only when both sides have it)."""
    err_l = float(np.sum((state.l_hat - l_true) ** 2))
    err_s = float(np.sum((state.s_hat - s_true) ** 2))
    err_d = None
    if d_true is not None and state.d_hat is not None:
        err_d = float(np.sum((state.d_hat - d_true) ** 2))
    return ErrorRecord(err_l, err_s, err_d)
