"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ContractViolation


def check_pairs(Y, U):
    """Validate paired sample blocks with equal row counts, returned as 2-d float arrays."""
    Y = check_array(np.atleast_2d(Y) if np.ndim(Y) < 2 else Y, dtype=np.float64,
                    ensure_min_samples=1)
    U = check_array(np.atleast_2d(U) if np.ndim(U) < 2 else U, dtype=np.float64,
                    ensure_min_samples=1)
    if Y.shape[0] != U.shape[0]:
        raise ContractViolation(f"row counts differ: {Y.shape[0]} vs {U.shape[0]}")
    return Y, U


def check_samples(X, name="samples"):
    X = np.asarray(X, dtype=np.float64)
    if X.size == 0:
        raise ContractViolation(f"{name} must be nonempty")
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ContractViolation(f"{name} must be 1-d or 2-d")
    return X


def check_is_fitted_attr(estimator, attr):
    check_is_fitted(estimator, attr)
