"""Likelihood building blocks shared by every estimator.

The secondary outcome is binary, so every integral over its support is the
two-point sum over y in {0, 1}.  Products of probabilities are handled on
the log scale.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _expit

from ._validation import check_rates
from .data import ParamVector, StratifiedDataset
from .exceptions import InfeasibleParametersError, InvalidInputError

_ONE_MINUS_ULP = 1.0 - 2.0**-53
_TINY = np.finfo(float).tiny


def softplus(t):
    """``log(1 + exp(t))`` without overflow."""
    t = np.asarray(t, dtype=float)
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def log_expit(t):
    """``log(expit(t))``."""
    return -softplus(-np.asarray(t, dtype=float))


def expit(t):
    """Logistic function, kept strictly inside (0, 1)."""
    out = _expit(np.asarray(t, dtype=float))
    if out.ndim == 0:
        return min(max(float(out), _TINY), _ONE_MINUS_ULP)
    np.maximum(out, _TINY, out=out)
    return np.minimum(out, _ONE_MINUS_ULP, out=out)


def _linear_predictor(intercept, x, slope, extra=0.0):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    slope = np.atleast_1d(np.asarray(slope, dtype=float))
    if x.shape != slope.shape:
        raise InvalidInputError(f"covariate length {x.size} does not match coefficient length {slope.size}")
    eta = float(intercept) + float(x @ slope) + extra
    if not np.isfinite(eta):
        raise InvalidInputError(f"linear predictor is not finite ({eta})")
    return eta


def _check_binary_scalar(v, name):
    if v not in (0, 1):
        raise InvalidInputError(f"{name} must be 0 or 1, got {v!r}")


def secondary_prob(y, x, beta0k, beta1):
    """P(Y = y | X = x, Z = k) under the secondary-outcome logistic model."""
    _check_binary_scalar(y, "y")
    eta = _linear_predictor(beta0k, x, beta1)
    return float(expit(eta if y == 1 else -eta))


def disease_prob(x, y, gamma0k, gamma1, gamma2):
    """P(D = 1 | X = x, Y = y, Z = k) under the disease logistic model."""
    _check_binary_scalar(y, "y")
    eta = _linear_predictor(gamma0k, x, gamma1, float(gamma2) * y)
    return float(expit(eta))


def log_rare_terms(X, beta0, beta1, gamma1, gamma2):
    """Vectorised ``log a_i`` with ``a_i = sum_y P(y|X_i) exp(gamma1'X_i + gamma2 y)``.

    ``beta0`` is the per-row secondary intercept (already indexed by stratum).
    """
    eta_y = beta0 + X @ beta1
    return X @ gamma1 + softplus(eta_y + gamma2) - softplus(eta_y)


def prob_weighted_terms(X, beta0, beta1, gamma0, gamma1, gamma2):
    """Vectorised ``(b1_i, b0_i)``: the disease probability of row i averaged over y.

    ``b1_i = sum_y P(y|X_i) expit(gamma0 + gamma1'X_i + gamma2 y)`` and ``b0_i``
    is the same sum with ``1 - expit``.  Both are computed directly (never as a
    difference) so tiny probabilities keep full relative precision.
    """
    eta_y = beta0 + X @ beta1
    p1 = expit(eta_y)
    p0 = expit(-eta_y)
    eta_d = gamma0 + X @ gamma1
    b1 = p0 * expit(eta_d) + p1 * expit(eta_d + gamma2)
    b0 = p0 * expit(-eta_d) + p1 * expit(-eta_d - gamma2)
    return b1, b0


def term_numerator_rare(x, beta0k, beta1, gamma1, gamma2):
    """``a_ki``: sum over y of P(y|x) exp(gamma1'x + gamma2 y) for one subject."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _linear_predictor(beta0k, x, beta1)
    _linear_predictor(0.0, x, gamma1, float(gamma2))
    la = log_rare_terms(x[None, :], np.array([float(beta0k)]), np.atleast_1d(beta1), np.atleast_1d(gamma1), float(gamma2))
    return float(np.exp(la[0]))


def term_prob_weighted(x, beta0k, beta1, gamma0k, gamma1, gamma2):
    """``(b1, b0)`` for one subject; see :func:`prob_weighted_terms`."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _linear_predictor(beta0k, x, beta1)
    _linear_predictor(gamma0k, x, gamma1, float(gamma2))
    b1, b0 = prob_weighted_terms(
        x[None, :], np.array([float(beta0k)]), np.atleast_1d(beta1), float(gamma0k), np.atleast_1d(gamma1), float(gamma2)
    )
    return float(b1[0]), float(b0[0])


def log_star(z, n):
    """Pseudo-logarithm: ``log z`` for ``z >= 1/n``, else its second-order Taylor extension.

    The extension ``log(1/n) - 1.5 + 2 n z - (n z)^2 / 2`` matches value, slope
    and curvature of ``log`` at ``1/n`` and is defined for all real ``z``.
    """
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    z = np.asarray(z, dtype=float)
    nz = n * z
    low = np.log(1.0 / n) - 1.5 + 2.0 * nz - nz * nz / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(nz >= 1.0, np.log(np.where(nz >= 1.0, z, 1.0)), low)
    return out if out.ndim else float(out)


def log_star_derivatives(z, n):
    """First and second derivatives of :func:`log_star` in ``z``."""
    z = np.asarray(z, dtype=float)
    nz = n * z
    safe = np.where(nz >= 1.0, z, 1.0)
    d1 = np.where(nz >= 1.0, 1.0 / safe, 2.0 * n - n * nz)
    d2 = np.where(nz >= 1.0, -1.0 / (safe * safe), -float(n) * n)
    return d1, d2


def log_star_from_log(log_z, n):
    """:func:`log_star` given ``log z`` (positive ``z`` only); avoids forming huge ``z``."""
    log_z = np.asarray(log_z, dtype=float)
    nz = n * np.exp(np.minimum(log_z, 0.0))
    low = np.log(1.0 / n) - 1.5 + 2.0 * nz - nz * nz / 2.0
    return np.where(log_z >= -np.log(n), log_z, low)


def row_intercepts(values, data: StratifiedDataset):
    """Expand per-stratum values to one value per stored row."""
    return np.asarray(values, dtype=float)[data.z - 1]


def recover_p(theta: ParamVector, data: StratifiedDataset, variant, aux=None, rates=None):
    """Covariate masses ``p_ki`` implied by the profiled likelihood.

    Parameters
    ----------
    theta : ParamVector
    data : StratifiedDataset
    variant : {"PM1", "PM2", "PM3"}
    aux : sequence of InnerSolution, optional
        Converged per-stratum inner solutions: ``xi_k`` for PM1, ``lambda_k``
        for PM2.  Ignored for PM3, whose rates are part of ``theta``.
    rates : array-like, optional
        Known stratum rates (PM2 only).

    Returns
    -------
    list of ndarray
        One mass vector per stratum, in stored row order.
    """
    K = data.K
    out = []
    if variant == "PM1":
        if aux is None or len(aux) != K:
            raise InvalidInputError("PM1 mass recovery needs one inner solution per stratum")
        log_a = log_rare_terms(data.x, row_intercepts(theta.beta0, data), theta.beta1, theta.gamma1, theta.gamma2)
        for k in range(K):
            sl = data.slices[k]
            n1, n0 = data.n1k[k], data.n0k[k]
            xi = aux[k].value
            out.append(1.0 / (n0 + n1 * xi * np.exp(log_a[sl])))
    elif variant in ("PM2", "PM3"):
        b1, b0 = prob_weighted_terms(
            data.x, row_intercepts(theta.beta0, data), theta.beta1, row_intercepts(theta.gamma0, data), theta.gamma1, theta.gamma2
        )
        if variant == "PM2":
            if aux is None or len(aux) != K:
                raise InvalidInputError("PM2 mass recovery needs one inner solution per stratum")
            xi0 = check_rates(rates, K)
        for k in range(K):
            sl = data.slices[k]
            n, n1, n0 = data.n_k[k], data.n1k[k], data.n0k[k]
            if variant == "PM2":
                lam = aux[k].value
                denom = lam * b1[sl] + n - xi0[k] * lam
            else:
                xi = theta.xi[k]
                denom = n1 * b1[sl] / xi + n0 * b0[sl] / (1.0 - xi)
            if np.any(denom <= 0) or not np.all(np.isfinite(denom)):
                raise InfeasibleParametersError(f"non-positive covariate mass in stratum {k + 1}")
            out.append(1.0 / denom)
    else:
        raise InvalidInputError(f"unknown variant {variant!r}")
    for k, p in enumerate(out):
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise InfeasibleParametersError(f"non-positive covariate mass in stratum {k + 1}")
    return out
