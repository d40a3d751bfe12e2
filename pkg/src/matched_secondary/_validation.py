"""Input validation helpers used by the estimators and the data types."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length

from .exceptions import InvalidInputError


def check_binary(values, name):
    """Return `values` as an int8 vector, raising unless every entry is 0 or 1."""
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be one-dimensional, got shape {arr.shape}")
    if arr.size and not np.all(np.isin(arr, (0, 1))):
        bad = np.unique(arr[~np.isin(arr, (0, 1))])[:5]
        raise InvalidInputError(f"{name} must be binary (0/1); found {bad.tolist()}")
    return arr.astype(np.int8)


def check_covariates(X, n_features=None):
    """2-D finite float array; a 1-D input is treated as a single covariate."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    try:
        X = check_array(X, dtype=float, ensure_2d=True, ensure_all_finite=True)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
    if n_features is not None and X.shape[1] != n_features:
        raise InvalidInputError(f"expected {n_features} covariates, got {X.shape[1]}")
    return X


def encode_strata(strata):
    """Map arbitrary stratum labels to 1..K in sorted label order.

    Returns
    -------
    codes : ndarray of int
    labels : tuple
        ``labels[k - 1]`` is the original label of stratum ``k``.
    """
    strata = np.asarray(strata)
    if strata.ndim != 1:
        raise InvalidInputError("strata must be one-dimensional")
    labels, codes = np.unique(strata, return_inverse=True)
    return codes.astype(np.int64) + 1, tuple(labels.tolist())


def check_finite_scalar(value, name):
    value = float(value)
    if not np.isfinite(value):
        raise InvalidInputError(f"{name} must be finite, got {value}")
    return value


def check_rates(rates, n_strata):
    """Validate a vector of stratum disease rates strictly inside (0, 1)."""
    rates = np.atleast_1d(np.asarray(rates, dtype=float))
    if rates.ndim != 1 or rates.size != n_strata:
        raise InvalidInputError(
            f"expected {n_strata} stratum disease rates (one per stratum), got {rates.size}"
        )
    if not np.all((rates > 0) & (rates < 1)):
        raise InvalidInputError(f"disease rates must lie strictly in (0, 1); got {rates.tolist()}")
    return rates


def check_lengths(*arrays):
    try:
        check_consistent_length(*arrays)
    except ValueError as exc:
        raise InvalidInputError(str(exc)) from exc
