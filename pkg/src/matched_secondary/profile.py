"""Profiled log-likelihoods for the three estimators.

Each objective is the maximum of the retrospective log-likelihood over the
per-stratum covariate masses, with constants kept so that the value equals
that maximum exactly:

* PM1 (rare disease): masses eliminated through a scalar normaliser ``xi_k``
  per stratum, itself the root of a monotone equation.
* PM2 (known stratum rates ``xi0_k``): masses carry an extra moment
  constraint; the multiplier ``lambda_k`` solves the concave dual with the
  pseudo-logarithm so every trial point is finite.
* PM3 (unknown rates): ``xi_k`` are free parameters (optimised on the logit
  scale); the masses are closed-form given ``xi_k``.

Objectives are larger-is-better.  Parameter points where an inner problem has
no solution evaluate to a large negative penalty instead of raising, so a
line search can back off.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ._validation import check_rates
from .data import ParamLayout, ParamVector, StratifiedDataset
from .exceptions import InfeasibleParametersError, InnerSolverError, InvalidInputError
from .model import log_star, log_star_derivatives, log_star_from_log, prob_weighted_terms, softplus

PENALTY = -1e10
INNER_TOL = 1e-13
INNER_MAX_ITER = 200
_LOG_BRACKET = math.log(1e12)


@dataclass(frozen=True)
class InnerSolution:
    """Converged per-stratum auxiliary: ``xi_k`` (PM1) or ``lambda_k`` (PM2)."""

    stratum: int
    value: float
    residual: float
    iterations: int


@dataclass(frozen=True)
class KnownRates:
    """Known stratum disease rates ``P(D = 1 | Z = k)``."""

    xi0: np.ndarray

    def __post_init__(self):
        xi0 = np.atleast_1d(np.asarray(self.xi0, dtype=float))
        check_rates(xi0, xi0.size)
        object.__setattr__(self, "xi0", xi0)

    def __len__(self):
        return self.xi0.size


def _solve_log_xi(log_a, n1, stratum=1):
    """Root ``s = log xi`` of ``sum_i expit(s + log a_i + log(n1/n0)) = n1``."""
    n = log_a.size
    n0 = n - n1
    if n1 < 1 or n0 < 1:
        raise InvalidInputError(f"stratum {stratum} needs at least one case and one control")
    c = log_a + math.log(n1 / n0)
    lmax = float(np.max(log_a))
    s0 = -(lmax + math.log(np.sum(np.exp(log_a - lmax)))) + math.log(n)

    def h(s):
        e = expit(s + c)
        return float(np.sum(e)) - n1, float(np.sum(e * (1.0 - e)))

    # expand geometrically around s0, clipped to xi in [1e-12, 1e12]
    lo, hi = max(s0 - 1.0, -_LOG_BRACKET), min(s0 + 1.0, _LOG_BRACKET)
    hlo, _ = h(lo)
    hhi, _ = h(hi)
    width = 1.0
    while hlo > 0 or hhi < 0:
        if (hlo > 0 and lo <= -_LOG_BRACKET) or (hhi < 0 and hi >= _LOG_BRACKET):
            raise InnerSolverError(stratum, "could not bracket the rare-disease normaliser xi in [1e-12, 1e12]")
        width *= 2.0
        if hlo > 0:
            lo = max(s0 - width, -_LOG_BRACKET)
            hlo, _ = h(lo)
        if hhi < 0:
            hi = min(s0 + width, _LOG_BRACKET)
            hhi, _ = h(hi)
    s = min(max(s0, lo), hi)
    for it in range(1, INNER_MAX_ITER + 1):
        val, der = h(s)
        if abs(val) / n1 < INNER_TOL:
            return s, val / n1, it
        if val < 0:
            lo = s
        else:
            hi = s
        step = val / der if der > 0 else np.inf
        s_new = s - step
        if not (lo < s_new < hi):
            s_new = 0.5 * (lo + hi)
        if abs(s_new - s) <= 1e-15 * max(1.0, abs(s)):
            val, _ = h(s_new)
            return s_new, val / n1, it
        s = s_new
    val, _ = h(s)
    if abs(val) / n1 < 1e-10:
        return s, val / n1, INNER_MAX_ITER
    raise InnerSolverError(stratum, "rare-disease normaliser did not converge")


def solve_xi_pm1(a, n_cases, stratum=1):
    """Solve ``sum_i xi a_i / (n0 + n1 xi a_i) = 1`` for ``xi > 0``.

    Parameters
    ----------
    a : array-like of positive floats
        The stratum's rare-disease terms (see :func:`model.term_numerator_rare`).
    n_cases : int
        Number of cases ``n1`` in the stratum; ``n0 = len(a) - n1``.
    stratum : int
        Reported in errors.

    Returns
    -------
    InnerSolution
        ``value`` is ``xi``; ``residual`` is the left side minus one.
    """
    a = np.asarray(a, dtype=float)
    if a.ndim != 1 or np.any(~np.isfinite(a)) or np.any(a <= 0):
        raise InvalidInputError("rare-disease terms must be positive and finite")
    s, res, it = _solve_log_xi(np.log(a), int(n_cases), stratum)
    return InnerSolution(stratum, math.exp(s), res, it)


def _solve_dual_t(u, n, stratum=1):
    """Maximiser ``t`` of ``sum_i log*(1 + t u_i)`` (pseudo-log with threshold 1/n)."""
    umin, umax = float(u.min()), float(u.max())
    if max(abs(umin), abs(umax)) <= 1e-12:
        # uniform masses already meet the rate up to rounding
        return 0.0, float(np.mean(u)), 0
    if umax <= 0.0 or umin >= 0.0:
        raise InnerSolverError(stratum, "known rate lies outside the range of the stratum's disease probabilities")

    def grad(t):
        d1, d2 = log_star_derivatives(1.0 + t * u, n)
        return float(np.sum(u * d1)), float(np.sum(u * u * d2))

    g0 = float(np.sum(u))
    if g0 == 0.0:
        return 0.0, 0.0, 0
    if g0 > 0:
        lo, hi = 0.0, (1.0 / n - 1.0) / umin
    else:
        lo, hi = (1.0 / n - 1.0) / umax, 0.0
    t = 0.0
    for it in range(1, INNER_MAX_ITER + 1):
        g, gp = grad(t)
        if abs(g) / n < INNER_TOL:
            return t, g / n, it
        if g > 0:
            lo = t
        else:
            hi = t
        t_new = t - g / gp if gp < 0 else np.nan
        if not (lo < t_new < hi):
            t_new = 0.5 * (lo + hi)
        if abs(t_new - t) <= 1e-16 * max(1.0, abs(t)):
            g, _ = grad(t_new)
            return t_new, g / n, it
        t = t_new
    g, _ = grad(t)
    if abs(g) / n < 1e-10:
        return t, g / n, INNER_MAX_ITER
    raise InnerSolverError(stratum, "known-rate multiplier did not converge")


def solve_lambda_pm2(b1, xi0, stratum=1):
    """Lagrange multiplier of the known-rate constraint in one stratum.

    The masses are ``p_i = 1 / (lambda b1_i + n - xi0 lambda)``.  The returned
    ``lambda`` is the non-trivial solution of ``sum_i p_i = 1`` (``lambda = 0``
    always satisfies that equation but not the rate constraint unless the
    uniform masses already do), found as the maximiser of the concave dual
    ``sum_i log*(1 + t (b1_i - xi0))`` with ``lambda = n t``.

    Returns
    -------
    InnerSolution
        ``residual`` is ``sum_i p_i b1_i - xi0``.
    """
    b1 = np.asarray(b1, dtype=float)
    xi0 = float(xi0)
    if not 0.0 < xi0 < 1.0:
        raise InvalidInputError(f"known rate must lie in (0, 1), got {xi0}")
    n = b1.size
    t, res, it = _solve_dual_t(b1 - xi0, n, stratum)
    return InnerSolution(stratum, n * t, res, it)


class ProfileObjective:
    """Callable profile log-likelihood over the flat parameter vector.

    Parameters
    ----------
    data : StratifiedDataset
    variant : {"PM1", "PM2", "PM3"}
    rates : array-like or KnownRates, optional
        Required for PM2.
    """

    def __init__(self, data: StratifiedDataset, variant, rates=None):
        self.data = data
        self.variant = variant
        self.layout = ParamLayout(data.K, data.q, variant)
        if variant == "PM2":
            if rates is None:
                raise InvalidInputError("PM2 needs known stratum disease rates")
            if isinstance(rates, KnownRates):
                rates = rates.xi0
            self.rates = check_rates(rates, data.K)
        else:
            self.rates = None
        self.n_evals = 0
        self._idx = data.z - 1
        self._n = data.n_k.astype(float)
        self._n1 = data.n1k.astype(float)
        self._n0 = data.n0k.astype(float)
        self._nlogn = self._n * np.log(self._n)
        if variant == "PM2":
            xi0 = self.rates
            self._rate_const = self._n1 * np.log(xi0) + self._n0 * np.log1p(-xi0)

    def _params(self, theta):
        if isinstance(theta, ParamVector):
            return theta, self.layout.pack(theta)
        flat = np.asarray(theta, dtype=float)
        return self.layout.unpack(flat), flat

    def __call__(self, theta):
        return self.evaluate(theta)[0]

    def penalty(self, flat):
        return PENALTY - float(flat @ flat)

    def evaluate(self, theta, details=False):
        """Return ``(value, info)``.

        ``info`` is ``None`` unless ``details``; then it holds per-stratum
        contributions, inner solutions and masses.  When the point is
        infeasible, ``value`` is the penalty and ``info`` (if requested)
        carries the error.
        """
        params, flat = self._params(theta)
        blocks, inner, masses, error = self._checked_blocks(params, details)
        if error is not None:
            pen = self.penalty(flat)
            return pen, ({"error": error, "penalised": True} if details else None)
        contribs = [math.fsum(b.tolist()) for b in blocks]
        value = math.fsum(contribs)
        if not details:
            return value, None
        return value, {"contributions": np.array(contribs), "inner": inner, "p_masses": masses, "penalised": False}

    def terms(self, theta):
        """Summands of the objective as one vector, or ``None`` at an infeasible point."""
        params, _ = self._params(theta)
        blocks, _, _, error = self._checked_blocks(params, False)
        return None if error is not None else np.concatenate(blocks)

    def _checked_blocks(self, params, details):
        self.n_evals += 1
        try:
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                blocks, inner, masses = self._blocks(params, details)
        except (InnerSolverError, InfeasibleParametersError) as exc:
            return None, None, None, exc
        if not all(np.all(np.isfinite(b)) for b in blocks):
            return None, None, None, InfeasibleParametersError("non-finite objective")
        return blocks, inner, masses, None

    def _blocks(self, params, details):
        """Per-stratum summand vectors (row terms followed by stratum constants)."""
        data = self.data
        X, D, Y = data.x, data.d, data.y
        eta_y = params.beta0[self._idx] + X @ params.beta1
        log_py = np.where(Y == 1, -softplus(-eta_y), -softplus(eta_y))
        gx = X @ params.gamma1
        blocks, inner, masses = [], [], []
        if self.variant == "PM1":
            common = log_py + D * (gx + params.gamma2 * Y)
            log_a = gx + softplus(eta_y + params.gamma2) - softplus(eta_y)
            for k, sl in enumerate(data.slices):
                n, n1, n0 = self._n[k], self._n1[k], self._n0[k]
                s, res, it = _solve_log_xi(log_a[sl], int(n1), k + 1)
                log_z = math.log(n0 / n) + softplus(s + log_a[sl] + math.log(n1 / n0))
                blocks.append(np.concatenate([common[sl], -log_star_from_log(log_z, n), [n1 * s, -self._nlogn[k]]]))
                if details:
                    inner.append(InnerSolution(k + 1, math.exp(s), res, it))
                    masses.append(np.exp(-log_z) / n)
            return blocks, inner, masses

        eta_d = params.gamma0[self._idx] + gx
        eta_obs = eta_d + params.gamma2 * Y
        common = log_py + np.where(D == 1, -softplus(-eta_obs), -softplus(eta_obs))
        b1, b0 = prob_weighted_terms(X, params.beta0[self._idx], params.beta1, params.gamma0[self._idx], params.gamma1, params.gamma2)
        for k, sl in enumerate(data.slices):
            n, n1, n0 = self._n[k], self._n1[k], self._n0[k]
            if self.variant == "PM2":
                xi0 = self.rates[k]
                u = b1[sl] - xi0
                t, res, it = _solve_dual_t(u, int(n), k + 1)
                arg = 1.0 + t * u
                blocks.append(np.concatenate([common[sl], -log_star(arg, n), [-self._nlogn[k], -self._rate_const[k]]]))
                if details:
                    if np.any(arg <= 0):
                        raise InfeasibleParametersError(f"non-positive covariate mass in stratum {k + 1}")
                    inner.append(InnerSolution(k + 1, n * t, res, it))
                    masses.append(1.0 / (n * arg))
            else:
                xi = params.xi[k]
                w = n1 * b1[sl] / xi + n0 * b0[sl] / (1.0 - xi)
                consts = [-n1 * math.log(xi), -n0 * math.log1p(-xi), -self._nlogn[k]]
                blocks.append(np.concatenate([common[sl], -log_star(w / n, n), consts]))
                if details:
                    masses.append(1.0 / w)
        return blocks, inner, masses


class RelativeObjective:
    """``f(theta) - f(theta_ref)`` summed from per-term differences.

    Rounding error then scales with the individual summands rather than with
    the (large) total, which keeps finite-difference gradients accurate well
    below the resolution of the absolute objective.
    """

    def __init__(self, objective: ProfileObjective, theta_ref):
        self.objective = objective
        self.rebase(theta_ref)

    def rebase(self, theta_ref):
        ref = self.objective.terms(theta_ref)
        if ref is None:
            raise InfeasibleParametersError("reference point is infeasible")
        self._ref = ref
        self.ref_value = math.fsum(ref.tolist())
        return self

    def __call__(self, theta):
        t = self.objective.terms(theta)
        if t is None:
            return self.objective.penalty(self.objective._params(theta)[1])
        return math.fsum((t - self._ref).tolist())


def profile_loglik_pm1(theta, data):
    """PM1 profile log-likelihood; ``theta`` is a flat vector or a ParamVector (no ``gamma0``)."""
    return ProfileObjective(data, "PM1")(theta)


def profile_loglik_pm2(theta, data, rates):
    """PM2 profile log-likelihood given known stratum disease rates."""
    return ProfileObjective(data, "PM2", rates)(theta)


def profile_loglik_pm3(theta, data):
    """PM3 profile log-likelihood; ``theta`` carries the stratum rates ``xi``."""
    return ProfileObjective(data, "PM3")(theta)


def stratum_contributions(theta, data, variant, rates=None):
    """Per-stratum terms whose (compensated) sum is the profile log-likelihood."""
    value, info = ProfileObjective(data, variant, rates).evaluate(theta, details=True)
    if info["penalised"]:
        raise info["error"]
    return info["contributions"]
