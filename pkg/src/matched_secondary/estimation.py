"""Outer maximisation of the profile log-likelihoods and inverse-Hessian inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import FitResult, ParamLayout, ParamVector, StratifiedDataset, VARIANTS
from .exceptions import ConvergenceError, InvalidInputError
from .naive import logistic_fit
from .profile import PENALTY, KnownRates, ProfileObjective, RelativeObjective

logger = logging.getLogger(__name__)

Z975 = 1.959963984540054
INIT_STRATEGIES = ("naive-warm-start", "zeros", "user-supplied")


@dataclass(frozen=True)
class FitOptions:
    """Settings for :func:`fit`.

    Steps are relative: component ``j`` is perturbed by ``h * max(1, |theta_j|)``.
    """

    variant: str = "PM2"
    init: str = "naive-warm-start"
    initial_theta: Optional[np.ndarray] = None
    gradient_step: float = 1e-6
    hessian_step: float = 1e-4
    gtol: float = 1e-6
    ftol: float = 1e-10
    max_iter: int = 500

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.init not in INIT_STRATEGIES:
            raise InvalidInputError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")
        if self.init == "user-supplied" and self.initial_theta is None:
            raise InvalidInputError("init='user-supplied' needs initial_theta")
        for name in ("gradient_step", "hessian_step", "gtol", "ftol"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.max_iter < 1:
            raise InvalidInputError("max_iter must be at least 1")


def _steps(theta, h):
    return h * np.maximum(1.0, np.abs(theta))


def _checked(value, j):
    if not math.isfinite(value):
        raise InvalidInputError(f"objective is not finite when perturbing component {j}")
    return value


def numerical_gradient(f, theta, h=1e-6, f0=None, return_curvature=False, floor=None):
    """Central-difference gradient with per-component step ``h * max(1, |theta_j|)``.

    With ``return_curvature`` (and ``f0 = f(theta)``) the diagonal second
    differences obtained from the same evaluations are returned as well.

    ``floor`` marks values at or below it as infeasible: a component with one
    infeasible neighbour falls back to the one-sided difference, and one with
    both neighbours infeasible gets slope zero (curvature NaN).
    """
    theta = np.asarray(theta, dtype=float)
    steps = _steps(theta, h)
    grad = np.empty(theta.size)
    curv = np.empty(theta.size)
    if floor is not None and f0 is None:
        f0 = f(theta)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = steps[j]
        fp = _checked(f(theta + e), j)
        fm = _checked(f(theta - e), j)
        if floor is not None and (fp <= floor or fm <= floor):
            if fp > floor:
                grad[j] = (fp - f0) / steps[j]
            elif fm > floor:
                grad[j] = (f0 - fm) / steps[j]
            else:
                grad[j] = 0.0
            curv[j] = np.nan
            continue
        grad[j] = (fp - fm) / (2 * steps[j])
        if return_curvature:
            curv[j] = (fp - 2 * f0 + fm) / steps[j] ** 2
    if return_curvature:
        return grad, curv
    return grad


def numerical_hessian(f, theta, h=1e-4):
    """Central second-difference Hessian, symmetrised as ``(H + H') / 2``."""
    theta = np.asarray(theta, dtype=float)
    p = theta.size
    steps = _steps(theta, h)
    f0 = _checked(f(theta), -1)
    H = np.empty((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = steps[i]
        fp = _checked(f(theta + ei), i)
        fm = _checked(f(theta - ei), i)
        H[i, i] = (fp - 2 * f0 + fm) / steps[i] ** 2
        for j in range(i):
            ej = np.zeros(p)
            ej[j] = steps[j]
            fpp = _checked(f(theta + ei + ej), i)
            fpm = _checked(f(theta + ei - ej), i)
            fmp = _checked(f(theta - ei + ej), i)
            fmm = _checked(f(theta - ei - ej), i)
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * steps[i] * steps[j])
    return 0.5 * (H + H.T)


@dataclass
class OptimResult:
    theta: np.ndarray
    value: float
    grad: np.ndarray
    n_iter: int
    converged: bool
    message: str
    history: list


def bfgs_maximize(f, theta0, h=1e-6, gtol=1e-6, ftol=1e-10, max_iter=500, c1=1e-4, relative=None):
    """Maximise ``f`` by BFGS with Armijo backtracking and finite-difference gradients.

    Converged means both ``max|grad| < gtol`` and a relative change of the
    objective below ``ftol`` on the last accepted step.  Accepted objective
    values never decrease.

    Parameters
    ----------
    relative : callable, optional
        ``relative(x)`` returns a function ``g`` with ``g(theta) = f(theta) - f(x)``
        computed more accurately than the plain difference; all gradients and
        line-search comparisons around the current iterate then use ``g``.
    """
    x = np.asarray(theta0, dtype=float).copy()
    fx = f(x)
    if fx <= PENALTY / 2:
        raise ConvergenceError("starting point is infeasible")
    if relative is None:

        def relative(ref):
            base = f(ref)
            return lambda theta: f(theta) - base

    rel = relative(x)
    g, curv = numerical_gradient(rel, x, h, f0=0.0, return_curvature=True, floor=PENALTY / 2)
    # diagonal curvature from the gradient evaluations seeds the inverse Hessian
    ok = np.isfinite(curv) & (curv < -1e-8)
    diag = np.where(ok, -1.0 / np.where(ok, curv, -1.0), 1.0)
    Hinv = np.diag(diag)
    history = [fx]
    rel_change = np.inf
    message = "iteration limit reached"
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        gmax = float(np.max(np.abs(g)))
        if gmax < gtol and rel_change < ftol:
            converged = True
            message = "converged"
            break
        direction = Hinv @ g
        slope = float(g @ direction)
        if slope <= 0:
            Hinv = np.diag(diag)
            direction = Hinv @ g
            slope = float(g @ direction)
        accepted = False
        for attempt in range(2):
            if attempt == 1:
                # no ascent along the quasi-Newton direction: retry along the scaled gradient
                direction = g * diag
                slope = float(g @ direction)
            alpha = 1.0
            while alpha > 1e-12:
                cand = x + alpha * direction
                gain = rel(cand)
                if gain >= c1 * alpha * slope and gain >= 0:
                    fc = f(cand)
                    accepted = fc >= fx
                    break
                alpha *= 0.5
            if accepted:
                break
        g_new = None
        if not accepted:
            # gains below the objective's resolution: accept a non-decreasing step
            # that shrinks the gradient, quasi-Newton first, then Newton on a
            # finite-difference Hessian
            for attempt in range(2):
                if attempt == 1:
                    negH = -numerical_hessian(rel, x, 1e-4)
                    try:
                        np.linalg.cholesky(negH)
                    except np.linalg.LinAlgError:
                        break
                    Hinv = np.linalg.inv(negH)
                direction = Hinv @ g
                alpha = 1.0
                for _ in range(6):
                    cand = x + alpha * direction
                    fc = f(cand)
                    if fc >= fx:
                        g_try = numerical_gradient(relative(cand), cand, h, f0=0.0, floor=PENALTY / 2)
                        if np.max(np.abs(g_try)) < gmax:
                            accepted, g_new = True, g_try
                            break
                    alpha *= 0.5
                if accepted:
                    break
        if not accepted:
            converged = gmax < gtol
            message = "line search failed" + ("" if converged else f" with max|grad| = {gmax:.3g}")
            break
        rel = relative(cand)
        if g_new is None:
            g_new = numerical_gradient(rel, cand, h, f0=0.0, floor=PENALTY / 2)
        s = cand - x
        yv = g - g_new  # gradient of -f changes by -(g_new - g)
        rel_change = (fc - fx) / max(1.0, abs(fc))
        fx = fc
        x, g = cand, g_new
        history.append(fx)
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(yv)):
            rho = 1.0 / sy
            I = np.eye(x.size)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
    else:
        gmax = float(np.max(np.abs(g)))
        converged = gmax < gtol and rel_change < ftol
        if converged:
            message = "converged"
    return OptimResult(x, fx, g, it, converged, message, history)


def _dummy_design(data, extra):
    Zd = (data.z[:, None] == np.arange(1, data.K + 1)[None, :]).astype(float)
    return np.column_stack([Zd, *extra])


def _safe_logistic(y, design):
    try:
        fit = logistic_fit(y, design)
    except InvalidInputError:
        return None
    if not np.all(np.isfinite(fit.coef)) or fit.separation:
        return None
    return fit.coef


def warm_start(data: StratifiedDataset, variant, rates=None):
    """Starting values from naive fits.

    ``(beta0_k, beta1)`` come from the secondary-outcome regression adjusted
    for stratum and disease status (stratum intercepts taken at ``D = 0``);
    ``(gamma0_k, gamma1, gamma2)`` from a stratified logistic fit of ``D`` on
    ``(X, Y)``, whose intercepts are moved from the case-control scale to the
    population scale using the (known or provisional) stratum rates.
    """
    K, q = data.K, data.q
    layout = ParamLayout(K, q, variant)
    coef = _safe_logistic(data.y, _dummy_design(data, [*data.x.T, data.d.astype(float)]))
    if coef is None:
        beta0, beta1 = np.zeros(K), np.zeros(q)
    else:
        beta0, beta1 = coef[:K], coef[K : K + q]
    coef = _safe_logistic(data.d, _dummy_design(data, [*data.x.T, data.y.astype(float)]))
    if coef is None:
        g0cc, gamma1, gamma2 = np.zeros(K), np.zeros(q), 0.0
    else:
        g0cc, gamma1, gamma2 = coef[:K], coef[K : K + q], float(coef[K + q])
    sampling_offset = np.log(data.n1k / data.n0k)
    if variant == "PM1":
        return layout.pack(ParamVector(beta0, beta1, None, gamma1, gamma2))
    if variant == "PM2":
        xi0 = rates.xi0 if isinstance(rates, KnownRates) else np.asarray(rates, dtype=float)
        gamma0 = g0cc - sampling_offset + np.log(xi0 / (1 - xi0))
        theta = layout.pack(ParamVector(beta0, beta1, gamma0, gamma1, gamma2))
        if ProfileObjective(data, "PM2", xi0)(theta) <= PENALTY / 2:
            return zeros_start(data, variant, rates)
        return theta
    # PM3: choose each stratum's provisional rate on a grid of logits, one stratum at a time
    objective = ProfileObjective(data, "PM3")
    grid = np.linspace(-7.0, 2.0, 37)
    gamma0 = g0cc - sampling_offset
    xi = np.full(K, 0.5)
    for k in range(K):
        best, best_t = -np.inf, 0.0
        for t in grid:
            g0 = gamma0.copy()
            g0[k] = gamma0[k] + t
            xi_try = xi.copy()
            xi_try[k] = 1.0 / (1.0 + math.exp(-t))
            value, info = objective.evaluate(ParamVector(beta0, beta1, g0, gamma1, gamma2, xi_try), details=True)
            if not info["penalised"] and info["contributions"][k] > best:
                best, best_t = info["contributions"][k], t
        xi[k] = 1.0 / (1.0 + math.exp(-best_t))
    gamma0 = gamma0 + np.log(xi / (1 - xi))
    return layout.pack(ParamVector(beta0, beta1, gamma0, gamma1, gamma2, xi))


def zeros_start(data: StratifiedDataset, variant, rates=None):
    """All-zero start, adjusted for PM2.

    PM2 sets ``gamma0_k = logit(xi0_k)`` so the rate constraint is satisfiable,
    and ``gamma1 = 0.01`` because at ``gamma1 = 0`` every ``P(D=1|X_i)`` in a
    stratum is equal: the constraint is then vacuous and the profile has an
    isolated spike there, above every neighbouring value.
    """
    layout = ParamLayout(data.K, data.q, variant)
    theta = np.zeros(layout.size)
    if variant == "PM2":
        xi0 = rates.xi0 if isinstance(rates, KnownRates) else np.asarray(rates, dtype=float)
        theta[layout.gamma0] = np.log(xi0 / (1 - xi0))
        theta[layout.gamma1] = 0.01
    return theta


def fit(data: StratifiedDataset, options: FitOptions = None, rates=None):
    """Maximum profile-likelihood fit of one estimator.

    Parameters
    ----------
    data : StratifiedDataset
    options : FitOptions
    rates : array-like or KnownRates
        Known stratum disease rates; required for PM2 and rejected otherwise.

    Returns
    -------
    FitResult

    Raises
    ------
    ConvergenceError
        If no feasible starting point exists or the inner problems fail at
        the final estimate.
    """
    options = options or FitOptions()
    variant = options.variant
    if (variant == "PM2") != (rates is not None):
        raise InvalidInputError("known rates must be given for PM2 and only for PM2")
    if rates is not None and not isinstance(rates, KnownRates):
        rates = KnownRates(rates)
    if rates is not None and len(rates) != data.K:
        raise InvalidInputError(f"expected {data.K} stratum disease rates, got {len(rates)}")
    objective = ProfileObjective(data, variant, rates)
    layout = objective.layout

    if options.init == "user-supplied":
        theta0 = np.asarray(options.initial_theta, dtype=float)
        if theta0.shape != (layout.size,):
            raise InvalidInputError(f"initial_theta must have length {layout.size}")
    elif options.init == "zeros":
        theta0 = zeros_start(data, variant, rates)
    else:
        theta0 = warm_start(data, variant, rates)

    if objective(theta0) <= PENALTY / 2:
        raise ConvergenceError("starting point is infeasible")
    opt = bfgs_maximize(
        objective,
        theta0,
        h=options.gradient_step,
        gtol=options.gtol,
        ftol=options.ftol,
        max_iter=options.max_iter,
        relative=lambda ref: RelativeObjective(objective, ref),
    )
    value, info = objective.evaluate(opt.theta, details=True)
    if info["penalised"]:
        raise ConvergenceError(f"inner problem failed at the final estimate: {info['error']}")

    H = numerical_hessian(RelativeObjective(objective, opt.theta), opt.theta, options.hessian_step)
    negH = -H
    p = layout.size
    cov = None
    cond = float("inf")
    message = opt.message
    try:
        eig = np.linalg.eigvalsh(negH)
        cond = float(eig.max() / eig.min()) if eig.min() > 0 else float("inf")
        if eig.min() > 0:
            cov = np.linalg.inv(negH)
            cov = 0.5 * (cov + cov.T)
        else:
            message += "; negative Hessian not positive definite, covariance unavailable"
    except np.linalg.LinAlgError:
        message += "; Hessian decomposition failed, covariance unavailable"
    if cov is None:
        se = np.full(p, np.nan)
    else:
        se = np.sqrt(np.diag(cov))
    ci = np.column_stack([opt.theta - Z975 * se, opt.theta + Z975 * se])
    estimates = layout.unpack(opt.theta)
    xi_se = None
    if variant == "PM3":
        xi = estimates.xi
        xi_se = xi * (1 - xi) * se[layout.logit_xi]
    return FitResult(
        variant=variant,
        estimates=estimates,
        param_names=layout.names(),
        theta=opt.theta,
        covariance=cov,
        se=se,
        ci95=ci,
        loglik=value,
        converged=bool(opt.converged),
        n_iter=opt.n_iter,
        grad_norm=float(np.max(np.abs(opt.grad))),
        p_masses=info["p_masses"],
        inner=info["inner"],
        condition_number=cond,
        xi_se=xi_se,
        message=message,
    )
