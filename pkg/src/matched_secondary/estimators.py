"""scikit-learn style estimators for the secondary-outcome models.

``X`` holds the covariates and ``y`` the secondary outcome; disease status
and matching strata are passed to ``fit`` as keyword arguments because they
describe the sampling design rather than the regression.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary, check_covariates, encode_strata
from .data import StratifiedDataset
from .estimation import FitOptions, fit
from .exceptions import InvalidInputError
from .model import expit
from .naive import NAIVE_METHODS, conditional_logistic_fit, fit_naive, naive_design
from .profile import KnownRates


def _dataset(X, y, disease, strata, factors=None):
    X = check_covariates(X)
    y = check_binary(y, "y")
    d = check_binary(disease, "disease")
    if strata is None:
        raise InvalidInputError("strata are required")
    z, labels = encode_strata(strata)
    if factors is not None:
        factors = np.asarray(factors)
        if factors.ndim == 1:
            factors = factors[:, None]
        factors = np.column_stack([np.unique(f, return_inverse=True)[1] for f in factors.T])
    return StratifiedDataset(d=d, z=z, y=y, x=X, factors=factors, stratum_labels=labels)


class _SecondaryOutcomeBase(ClassifierMixin, BaseEstimator):
    """Shared prediction code: ``P(Y = 1 | X, Z)`` from stratum intercepts and slopes."""

    def _stratum_rows(self, strata, n):
        if strata is None:
            raise InvalidInputError("strata are required for prediction")
        strata = np.asarray(strata)
        if strata.shape != (n,):
            raise InvalidInputError(f"strata must have shape ({n},)")
        index = {lab: k for k, lab in enumerate(self.strata_)}
        try:
            return np.array([index[s] for s in strata.tolist()], dtype=np.int64)
        except KeyError as exc:
            raise InvalidInputError(f"stratum {exc.args[0]!r} was not seen during fit") from None

    def decision_function(self, X, strata=None):
        check_is_fitted(self, "coef_")
        X = check_covariates(X, self.n_features_in_)
        rows = self._stratum_rows(strata, X.shape[0])
        return self.intercepts_[rows] + X @ self.coef_

    def predict_proba(self, X, strata=None):
        """Columns ``P(Y = 0)``, ``P(Y = 1)`` given covariates and stratum."""
        p1 = expit(self.decision_function(X, strata))
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X, strata=None):
        return (self.decision_function(X, strata) > 0).astype(np.int8)


class ProfileLikelihoodEstimator(_SecondaryOutcomeBase):
    """Semiparametric profile-likelihood fit of the secondary outcome model.

    Parameters
    ----------
    variant : {"PM1", "PM2", "PM3"}
        Rare-disease approximation, known stratum disease rates, or rates
        estimated jointly.
    rates : array-like, optional
        Known disease rate per stratum (PM2), ordered like the sorted
        stratum labels.
    init : {"naive-warm-start", "zeros"}
    gtol, max_iter : optimiser settings, see :class:`FitOptions`.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
        Covariate log odds ratios for the secondary outcome.
    intercepts_ : ndarray of shape (n_strata,)
    coef_se_ : ndarray of shape (n_features,)
    disease_coef_ : ndarray of shape (n_features + 1,)
        ``(gamma1, gamma2)`` of the disease model.
    disease_intercepts_ : ndarray or None
        Not estimable under the rare-disease approximation.
    stratum_rates_ : ndarray or None
        Estimated rates (PM3 only).
    result_ : FitResult
    strata_ : tuple
        Stratum labels in index order.
    """

    def __init__(self, variant="PM2", rates=None, init="naive-warm-start", gtol=1e-6, max_iter=500):
        self.variant = variant
        self.rates = rates
        self.init = init
        self.gtol = gtol
        self.max_iter = max_iter

    def fit(self, X, y, *, disease, strata, factors=None):
        data = _dataset(X, y, disease, strata, factors)
        options = FitOptions(variant=self.variant, init=self.init, gtol=self.gtol, max_iter=self.max_iter)
        rates = None
        if self.variant == "PM2":
            if self.rates is None:
                raise InvalidInputError("PM2 needs the known stratum disease rates")
            rates = KnownRates(self.rates)
        res = fit(data, options, rates)
        est = res.estimates
        self.result_ = res
        self.strata_ = data.stratum_labels
        self.n_features_in_ = data.q
        self.classes_ = np.array([0, 1])
        self.coef_ = np.asarray(est.beta1, dtype=float)
        self.intercepts_ = np.asarray(est.beta0, dtype=float)
        self.coef_se_ = res.beta1_se
        self.disease_coef_ = np.append(est.gamma1, est.gamma2)
        self.disease_intercepts_ = None if est.gamma0 is None else np.asarray(est.gamma0, dtype=float)
        self.stratum_rates_ = None if est.xi is None else np.asarray(est.xi, dtype=float)
        self.converged_ = res.converged
        return self


class NaiveLogit(_SecondaryOutcomeBase):
    """Unconditional logistic regression of the secondary outcome (naive comparator).

    Parameters
    ----------
    method : {"unadjusted", "adjusted1", "adjusted2", "adjusted3"}
    """

    def __init__(self, method="adjusted2"):
        self.method = method

    def fit(self, X, y, *, disease, strata, factors=None):
        if self.method not in NAIVE_METHODS or self.method == "conditional":
            raise InvalidInputError(f"method must be an unconditional design, got {self.method!r}")
        data = _dataset(X, y, disease, strata, factors)
        res = fit_naive(data, self.method)
        glm = res.detail
        self.result_ = glm
        self.strata_ = data.stratum_labels
        self.n_features_in_ = data.q
        self.classes_ = np.array([0, 1])
        self.coef_ = res.coef
        self.coef_se_ = res.se
        self.converged_ = res.converged
        # prediction uses the stratum-specific intercept at D = 0
        design, _ = naive_design(data, self.method)
        base = design.copy()
        base[:, 1 : 1 + data.q] = 0.0
        if self.method in ("adjusted2", "adjusted3"):
            base[:, -1] = 0.0
        offsets = base @ glm.coef
        self.intercepts_ = np.array([offsets[sl][0] for sl in data.slices])
        return self


class ConditionalLogit(BaseEstimator):
    """Exact conditional logistic regression of the secondary outcome within (stratum, disease) cells.

    Attributes
    ----------
    coef_, coef_se_ : ndarray of shape (n_features,)
    converged_ : bool
    result_ : CondLogitFit
    """

    def __init__(self, max_iter=100, tol=1e-8):
        self.max_iter = max_iter
        self.tol = tol

    def fit(self, X, y, *, disease, strata, factors=None):
        data = _dataset(X, y, disease, strata, factors)
        cells = 2 * (data.z - 1) + data.d
        res = conditional_logistic_fit(data.y, data.x, cells, max_iter=self.max_iter, tol=self.tol)
        self.result_ = res
        self.n_features_in_ = data.q
        self.coef_ = res.coef.copy()
        self.coef_se_ = res.se
        self.converged_ = res.converged
        return self
