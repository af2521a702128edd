"""Small input-validation helpers shared by the estimators and the MDP code."""
import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_finite(a, name="array"):
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def check_index(i, n, name="index"):
    if not isinstance(i, numbers.Integral) or not 0 <= i < n:
        raise IndexError(f"{name} {i!r} out of range [0, {n})")
    return int(i)


def check_design(X, Y):
    """Validate a regression pair; both must be 2-D, finite, with matching rows."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=1)
    Y = check_array(Y, dtype=np.float64, ensure_min_samples=1)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    return X, Y


def check_core(M, shape, name="core"):
    M = check_array(M, dtype=np.float64)
    if M.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {M.shape}")
    return M
