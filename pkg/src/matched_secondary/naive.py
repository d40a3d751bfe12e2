"""Naive comparators: unconditional logistic regression and exact conditional logistic regression."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from ._validation import check_binary, check_covariates, check_lengths
from .data import StratifiedDataset
from .exceptions import InvalidInputError, RankDeficientError
from .model import expit, softplus

NAIVE_METHODS = ("conditional", "unadjusted", "adjusted1", "adjusted2", "adjusted3")
BETA_DIVERGENCE = 50.0
COND_LIMIT = 1e12


@dataclass
class GlmFit:
    coef: np.ndarray
    covariance: np.ndarray
    converged: bool
    n_iter: int
    separation: bool = False
    loglik: float = float("nan")
    score_norm: float = float("nan")
    names: list = field(default_factory=list)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


@dataclass
class CondLogitFit:
    coef: np.ndarray
    covariance: np.ndarray
    converged: bool
    n_iter: int
    log_denominators: dict
    skipped_strata: list = field(default_factory=list)
    loglik: float = float("nan")
    score_norm: float = float("nan")
    diagnostic: str = ""

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.covariance), 0, None))


def _collinear_columns(design, names):
    """Columns carrying weight in a linear dependency of ``design`` (empty if full rank)."""
    _, sv, vt = np.linalg.svd(design, full_matrices=True)
    tol = (sv[0] if sv.size else 0.0) * max(design.shape) * np.finfo(float).eps
    rank = int(np.sum(sv > tol))
    null = vt[rank:]
    if not null.size:
        return []
    involved = np.max(np.abs(null), axis=0) > 1e-8
    return [names[j] for j in np.flatnonzero(involved)]


def logistic_fit(y, design, names=None, max_iter=100, tol=1e-8):
    """Maximum-likelihood logistic regression by Newton-Raphson (IRLS).

    Parameters
    ----------
    y : array of {0, 1}
    design : array, shape (n, p)
        Full design including any intercept column.
    names : list of str, optional
        Column names used in error messages.

    Returns
    -------
    GlmFit
        ``converged`` is False (with ``separation`` set) when a fitted
        probability collapses onto 0 or 1 while a coefficient diverges.
    """
    y = check_binary(y, "y").astype(float)
    X = np.asarray(design, dtype=float)
    if X.ndim != 2:
        raise InvalidInputError("design must be two-dimensional")
    check_lengths(y, X)
    n, p = X.shape
    names = list(names) if names is not None else [f"x{j}" for j in range(p)]
    if n < p:
        raise InvalidInputError(f"design has fewer rows ({n}) than columns ({p})")
    bad = _collinear_columns(X, names)
    if bad:
        raise RankDeficientError(bad)

    beta = np.zeros(p)

    def loglik(b):
        eta = X @ b
        return float(np.sum(y * eta - softplus(eta)))

    ll = loglik(beta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = expit(X @ beta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        info = (X * (mu * (1 - mu))[:, None]).T @ X
        try:
            step = scipy.linalg.solve(info, score, assume_a="pos")
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError):
            step = np.linalg.lstsq(info, score, rcond=None)[0]
        alpha = 1.0
        while True:
            cand = beta + alpha * step
            ll_new = loglik(cand)
            if ll_new >= ll - 1e-12 * abs(ll) or alpha < 1e-10:
                break
            alpha *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > 1e3:
            break
    mu = expit(X @ beta)
    score = X.T @ (y - mu)
    info = (X * (mu * (1 - mu))[:, None]).T @ X
    extreme = np.any((mu < 1e-10) | (mu > 1 - 1e-10))
    separation = bool(extreme and np.max(np.abs(beta)) > 15.0)
    if separation:
        converged = False
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
    return GlmFit(beta, cov, converged, it, separation, loglik(beta), float(np.max(np.abs(score))), names)


def _stratum_moments(x, m, beta):
    """Log-denominator and first two moments of the event-set total.

    Runs the recursion ``B(j, s) = B(j-1, s) + exp(beta'x_j) B(j-1, s-1)`` on the
    log scale for ``s = 0..m``, carrying the conditional mean ``M`` and second
    moment ``S`` of ``T = sum_{i in S} x_i`` under the distribution over
    event sets proportional to ``exp(beta'T)``.
    """
    n, q = x.shape
    w = x @ beta
    logB = np.full(m + 1, -np.inf)
    logB[0] = 0.0
    M = np.zeros((m + 1, q))
    S = np.zeros((m + 1, q, q))
    for j in range(n):
        top = min(j + 1, m)
        if top == 0:
            continue
        xj = x[j]
        prev_logB = logB[0:top]
        prev_M = M[0:top]
        prev_S = S[0:top]
        add = w[j] + prev_logB
        cur = logB[1 : top + 1]
        new_logB = np.logaddexp(cur, add)
        with np.errstate(invalid="ignore"):
            r = np.exp(add - new_logB)
        r = np.where(np.isneginf(cur), 1.0, r)
        shifted_M = prev_M + xj
        outer = prev_S + prev_M[:, :, None] * xj[None, None, :] + xj[None, :, None] * prev_M[:, None, :] + np.outer(xj, xj)
        keep = 1.0 - r
        S[1 : top + 1] = keep[:, None, None] * S[1 : top + 1] + r[:, None, None] * outer
        M[1 : top + 1] = keep[:, None] * M[1 : top + 1] + r[:, None] * shifted_M
        logB[1 : top + 1] = new_logB
    return logB[m], M[m], S[m]


def log_denominator(x, m, beta):
    """``log sum_{|S| = m} exp(beta' sum_{i in S} x_i)`` by the two-index recursion."""
    x = check_covariates(x)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    if not 0 <= m <= x.shape[0]:
        raise InvalidInputError(f"event count {m} outside 0..{x.shape[0]}")
    return float(_stratum_moments(x, int(m), beta)[0])


def conditional_loglik(y, x, strata, beta):
    """Exact conditional log-likelihood summed over strata."""
    y = check_binary(y, "y")
    x = check_covariates(x)
    strata = np.asarray(strata)
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    total = []
    for s in np.unique(strata):
        idx = strata == s
        m = int(y[idx].sum())
        xs = x[idx]
        total.append(float(beta @ xs[y[idx] == 1].sum(axis=0)) - log_denominator(xs, m, beta))
    return math.fsum(total)


def conditional_logistic_fit(y, x, strata, max_iter=100, tol=1e-8, beta_init=None):
    """Conditional logistic regression by Newton iteration on the exact conditional likelihood.

    Strata with no events or only events carry no information; they are
    skipped with a warning and listed in ``skipped_strata``.  Non-convergence
    (iteration cap, ``|beta| > 50`` or an information matrix with condition
    number above 1e12) is reported through ``converged = False``.
    """
    y = check_binary(y, "y")
    x = check_covariates(x)
    strata = np.asarray(strata)
    check_lengths(y, x, strata)
    q = x.shape[1]
    groups, skipped = [], []
    for s in np.unique(strata):
        idx = np.flatnonzero(strata == s)
        m = int(y[idx].sum())
        if m == 0 or m == idx.size:
            skipped.append(s.item() if hasattr(s, "item") else s)
            continue
        xs = x[idx] - x[idx].mean(axis=0)
        groups.append((s, xs, m, xs[y[idx] == 1].sum(axis=0)))
    if skipped:
        warnings.warn(f"conditional logistic: skipping non-informative strata {skipped}", RuntimeWarning, stacklevel=2)
    if not groups:
        raise InvalidInputError("conditional logistic regression needs at least one stratum with 0 < events < size")

    beta0 = np.zeros(q) if beta_init is None else np.atleast_1d(np.asarray(beta_init, dtype=float)).copy()

    def evaluate(b):
        ll, score, info, logden = [], np.zeros(q), np.zeros((q, q)), {}
        for s, xs, m, t_obs in groups:
            lb, mean, second = _stratum_moments(xs, m, b)
            ll.append(float(b @ t_obs) - lb)
            score += t_obs - mean
            info += second - np.outer(mean, mean)
            logden[s.item() if hasattr(s, "item") else s] = lb
        return math.fsum(ll), score, info, logden

    beta = beta0.copy()
    ll, score, info, logden = evaluate(beta)
    if np.allclose(info, 0.0, atol=1e-12) and np.allclose(score, 0.0, atol=1e-12):
        return CondLogitFit(
            beta0, np.full((q, q), np.nan), False, 0, logden, skipped, ll, float(np.max(np.abs(score))),
            "no information: covariates constant within every informative stratum",
        )
    converged = False
    diagnostic = ""
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(score)) < tol:
            converged = True
            break
        cond = np.linalg.cond(info)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            diagnostic = f"information matrix ill-conditioned (condition number {cond:.3g})"
            break
        step = np.linalg.solve(info, score)
        alpha = 1.0
        while True:
            cand = beta + alpha * step
            new = evaluate(cand)
            if new[0] >= ll - 1e-12 * abs(ll) or alpha < 1e-10:
                break
            alpha *= 0.5
        beta = cand
        ll, score, info, logden = new
        if np.max(np.abs(beta)) > BETA_DIVERGENCE:
            diagnostic = f"coefficient diverged (|beta| > {BETA_DIVERGENCE:g})"
            break
    else:
        diagnostic = f"iteration cap ({max_iter}) reached"
        converged = np.max(np.abs(score)) < tol
    if converged:
        cond = np.linalg.cond(info)
        if not np.isfinite(cond) or cond > COND_LIMIT:
            converged = False
            diagnostic = f"information matrix ill-conditioned (condition number {cond:.3g})"
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((q, q), np.nan)
    return CondLogitFit(beta, cov, converged, it, logden, skipped, ll, float(np.max(np.abs(score))), diagnostic)


def _dummies(codes, drop_first=True):
    levels = np.unique(codes)
    if drop_first:
        levels = levels[1:]
    return np.column_stack([(codes == lv).astype(float) for lv in levels]) if levels.size else np.empty((codes.size, 0))


def naive_design(data: StratifiedDataset, method):
    """Design matrix and column names for an unconditional naive regression.

    * ``unadjusted``: intercept + X
    * ``adjusted1``: + main effects of every matching factor
    * ``adjusted2``: ``adjusted1`` + D
    * ``adjusted3``: intercept + X + dummies of the full factor cross-classification + D
    """
    q = data.q
    cols = [np.ones(data.n), *data.x.T]
    names = ["intercept"] + [f"x{j}" for j in range(1, q + 1)]
    if method == "unadjusted":
        pass
    elif method in ("adjusted1", "adjusted2"):
        factors = data.matching_factors()
        for f in range(factors.shape[1]):
            dm = _dummies(factors[:, f])
            cols += list(dm.T)
            names += [f"factor{f + 1}_{lv}" for lv in np.unique(factors[:, f])[1:]]
        if method == "adjusted2":
            cols.append(data.d.astype(float))
            names.append("D")
    elif method == "adjusted3":
        dm = _dummies(data.z)
        cols += list(dm.T)
        names += [f"stratum_{k}" for k in range(2, data.K + 1)]
        cols.append(data.d.astype(float))
        names.append("D")
    else:
        raise InvalidInputError(f"unknown naive method {method!r}")
    return np.column_stack(cols), names


@dataclass
class NaiveEstimate:
    method: str
    coef: np.ndarray
    se: np.ndarray
    converged: bool
    detail: object = None


def fit_naive(data: StratifiedDataset, method):
    """Fit one naive comparator and return the covariate coefficients with their SEs."""
    q = data.q
    if method == "conditional":
        cells = 2 * (data.z - 1) + data.d
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            fit = conditional_logistic_fit(data.y, data.x, cells)
        return NaiveEstimate(method, fit.coef.copy(), fit.se, fit.converged, fit)
    design, names = naive_design(data, method)
    fit = logistic_fit(data.y, design, names)
    return NaiveEstimate(method, fit.coef[1 : 1 + q].copy(), fit.se[1 : 1 + q], fit.converged, fit)
