"""Domain types: observations, stratified datasets, parameter vectors and fit results."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ._validation import check_binary, check_covariates, check_lengths
from .exceptions import InvalidInputError

VARIANTS = ("PM1", "PM2", "PM3")


def _frozen(arr):
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Observation:
    """One sampled subject: disease status, stratum (1-based), secondary outcome, covariates."""

    d: int
    z: int
    y: int
    x: tuple

    def __post_init__(self):
        if self.d not in (0, 1) or self.y not in (0, 1):
            raise InvalidInputError(f"d and y must be 0/1, got d={self.d}, y={self.y}")
        if int(self.z) != self.z or self.z < 1:
            raise InvalidInputError(f"stratum index must be a positive integer, got {self.z}")
        x = tuple(float(v) for v in np.atleast_1d(self.x))
        if not all(np.isfinite(x)):
            raise InvalidInputError("covariates must be finite")
        object.__setattr__(self, "x", x)


@dataclass(frozen=True, eq=False)
class StratifiedDataset:
    """Matched case-control sample grouped by stratum.

    Rows are stored sorted by stratum (stable within a stratum) so every
    stratum occupies a contiguous block; ``row_index`` maps each stored row
    back to its position in the input.  Every stratum must contain at least
    one case and one control.

    Parameters
    ----------
    d, y : array of {0, 1}
        Disease status and secondary outcome.
    z : array of int
        Stratum index in ``1..K``.
    x : array, shape (n, q)
        Covariates.
    factors : array, shape (n, m), optional
        Integer codes of the matching factors whose cross-classification
        defines ``z``.  Used only by the naive adjusted regressions; when
        absent, ``z`` itself is the single matching factor.
    stratum_labels : tuple, optional
        Human-readable label of each stratum.
    """

    d: np.ndarray
    z: np.ndarray
    y: np.ndarray
    x: np.ndarray
    factors: Optional[np.ndarray] = None
    stratum_labels: Optional[tuple] = None
    row_index: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        d = check_binary(self.d, "d")
        y = check_binary(self.y, "y")
        z = np.asarray(self.z)
        if z.ndim != 1 or (z.size and not np.all(z == np.round(z))):
            raise InvalidInputError("z must be a one-dimensional vector of integer stratum indices")
        z = z.astype(np.int64)
        x = check_covariates(self.x)
        check_lengths(d, z, y, x)
        if z.size == 0:
            raise InvalidInputError("dataset is empty")
        if z.min() < 1:
            raise InvalidInputError("stratum indices must start at 1")
        factors = self.factors
        if factors is not None:
            factors = np.asarray(factors)
            if factors.ndim == 1:
                factors = factors[:, None]
            check_lengths(z, factors)
            factors = factors.astype(np.int64)

        K = int(z.max())
        n_k = np.bincount(z, minlength=K + 1)[1:]
        n1k = np.bincount(z, weights=d, minlength=K + 1)[1:].astype(np.int64)
        n0k = n_k - n1k
        bad = [k + 1 for k in range(K) if n_k[k] < 2 or n1k[k] < 1 or n0k[k] < 1]
        if bad:
            raise InvalidInputError(
                f"strata {bad} lack a case or a control (each stratum needs at least one of each)"
            )

        order = np.argsort(z, kind="stable")
        if self.row_index is None:
            row_index = order
        else:
            row_index = np.asarray(self.row_index)[order]
        labels = self.stratum_labels
        if labels is None:
            labels = tuple(range(1, K + 1))
        elif len(labels) != K:
            raise InvalidInputError(f"expected {K} stratum labels, got {len(labels)}")
        object.__setattr__(self, "d", _frozen(d[order]))
        object.__setattr__(self, "z", _frozen(z[order]))
        object.__setattr__(self, "y", _frozen(y[order]))
        object.__setattr__(self, "x", _frozen(x[order]))
        object.__setattr__(self, "factors", None if factors is None else _frozen(factors[order]))
        object.__setattr__(self, "stratum_labels", tuple(labels))
        object.__setattr__(self, "row_index", _frozen(row_index))
        object.__setattr__(self, "n_k", _frozen(n_k))
        object.__setattr__(self, "n1k", _frozen(n1k))
        object.__setattr__(self, "n0k", _frozen(n0k))
        bounds = np.concatenate([[0], np.cumsum(n_k)])
        object.__setattr__(self, "slices", tuple(slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])))

    @classmethod
    def from_observations(cls, observations: Sequence[Observation], **kwargs):
        obs = list(observations)
        if not obs:
            raise InvalidInputError("dataset is empty")
        q = {len(o.x) for o in obs}
        if len(q) != 1:
            raise InvalidInputError(f"all observations need the same number of covariates, got {sorted(q)}")
        return cls(
            d=[o.d for o in obs],
            z=[o.z for o in obs],
            y=[o.y for o in obs],
            x=np.array([o.x for o in obs], dtype=float),
            **kwargs,
        )

    @property
    def n(self):
        return int(self.z.size)

    @property
    def K(self):
        return int(self.n_k.size)

    @property
    def q(self):
        return int(self.x.shape[1])

    def observations(self):
        return [
            Observation(int(d), int(z), int(y), tuple(x))
            for d, z, y, x in zip(self.d, self.z, self.y, self.x)
        ]

    def stratum(self, k):
        """Arrays ``(d, y, x)`` of 1-based stratum ``k``."""
        sl = self.slices[k - 1]
        return self.d[sl], self.y[sl], self.x[sl]

    def matching_factors(self):
        """Matching-factor codes, defaulting to the stratum index as a single factor."""
        if self.factors is None:
            return self.z[:, None]
        return self.factors

    def fingerprint(self):
        """Stable hash of the stored rows; equal data gives equal fingerprints."""
        h = hashlib.sha256()
        for arr in (self.d, self.z, self.y, self.x, self.row_index):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ParamVector:
    """Structured parameters.

    ``gamma0`` is ``None`` for PM1 (the stratum disease intercepts cancel
    under the rare-disease approximation); ``xi`` is set only for PM3.
    """

    beta0: np.ndarray
    beta1: np.ndarray
    gamma0: Optional[np.ndarray]
    gamma1: np.ndarray
    gamma2: float
    xi: Optional[np.ndarray] = None

    def __post_init__(self):
        object.__setattr__(self, "beta0", np.atleast_1d(np.asarray(self.beta0, dtype=float)))
        object.__setattr__(self, "beta1", np.atleast_1d(np.asarray(self.beta1, dtype=float)))
        object.__setattr__(self, "gamma1", np.atleast_1d(np.asarray(self.gamma1, dtype=float)))
        object.__setattr__(self, "gamma2", float(self.gamma2))
        if self.gamma0 is not None:
            object.__setattr__(self, "gamma0", np.atleast_1d(np.asarray(self.gamma0, dtype=float)))
        if self.xi is not None:
            xi = np.atleast_1d(np.asarray(self.xi, dtype=float))
            if not np.all((xi > 0) & (xi < 1)):
                raise InvalidInputError("stratum disease rates xi must lie strictly in (0, 1)")
            object.__setattr__(self, "xi", xi)
        if self.beta1.size != self.gamma1.size:
            raise InvalidInputError("beta1 and gamma1 must have the same length")


class ParamLayout:
    """Fixed packing of a :class:`ParamVector` into a flat optimisation vector.

    Order: ``beta0[1..K], beta1, gamma0[1..K], gamma1, gamma2, logit(xi)[1..K]``
    where ``gamma0`` is omitted for PM1 and ``logit(xi)`` appears only for PM3.
    """

    def __init__(self, n_strata, n_covariates, variant):
        if variant not in VARIANTS:
            raise InvalidInputError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.K = int(n_strata)
        self.q = int(n_covariates)
        self.variant = variant
        K, q = self.K, self.q
        pos = 0
        self.beta0 = slice(pos, pos + K)
        pos += K
        self.beta1 = slice(pos, pos + q)
        pos += q
        if variant == "PM1":
            self.gamma0 = None
        else:
            self.gamma0 = slice(pos, pos + K)
            pos += K
        self.gamma1 = slice(pos, pos + q)
        pos += q
        self.gamma2 = pos
        pos += 1
        if variant == "PM3":
            self.logit_xi = slice(pos, pos + K)
            pos += K
        else:
            self.logit_xi = None
        self.size = pos

    def names(self):
        K, q = self.K, self.q
        out = [f"beta0[{k}]" for k in range(1, K + 1)]
        out += [f"beta1[{j}]" for j in range(1, q + 1)]
        if self.gamma0 is not None:
            out += [f"gamma0[{k}]" for k in range(1, K + 1)]
        out += [f"gamma1[{j}]" for j in range(1, q + 1)]
        out.append("gamma2")
        if self.logit_xi is not None:
            out += [f"logit_xi[{k}]" for k in range(1, K + 1)]
        return out

    def pack(self, params: ParamVector):
        flat = np.empty(self.size)
        flat[self.beta0] = params.beta0
        flat[self.beta1] = params.beta1
        if self.gamma0 is not None:
            if params.gamma0 is None:
                raise InvalidInputError(f"{self.variant} needs gamma0")
            flat[self.gamma0] = params.gamma0
        flat[self.gamma1] = params.gamma1
        flat[self.gamma2] = params.gamma2
        if self.logit_xi is not None:
            if params.xi is None:
                raise InvalidInputError("PM3 needs xi")
            flat[self.logit_xi] = np.log(params.xi) - np.log1p(-params.xi)
        return flat

    def unpack(self, flat):
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise InvalidInputError(f"expected a flat vector of length {self.size}, got shape {flat.shape}")
        xi = None
        if self.logit_xi is not None:
            t = flat[self.logit_xi]
            # keep xi strictly inside (0, 1) even for extreme logits
            xi = np.clip(expit(t), 1e-300, 1 - 2.0**-53)
        return ParamVector(
            beta0=flat[self.beta0].copy(),
            beta1=flat[self.beta1].copy(),
            gamma0=None if self.gamma0 is None else flat[self.gamma0].copy(),
            gamma1=flat[self.gamma1].copy(),
            gamma2=flat[self.gamma2],
            xi=xi,
        )


@dataclass
class FitResult:
    """Outcome of a profile-likelihood fit.

    ``covariance``, ``se`` and ``ci95`` are indexed like ``param_names``
    (the flat optimisation vector); for PM3 the covariance of the rates is
    on the logit scale while ``xi_se`` holds delta-method standard errors
    on the probability scale.
    """

    variant: str
    estimates: ParamVector
    param_names: list
    theta: np.ndarray
    covariance: Optional[np.ndarray]
    se: np.ndarray
    ci95: np.ndarray
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float
    p_masses: list
    inner: list = field(default_factory=list)
    condition_number: float = float("nan")
    xi_se: Optional[np.ndarray] = None
    message: str = ""

    def _index(self, name):
        return self.param_names.index(name)

    @property
    def beta1(self):
        return self.estimates.beta1

    @property
    def beta1_se(self):
        return np.array([self.se[self._index(f"beta1[{j}]")] for j in range(1, self.beta1.size + 1)])

    @property
    def beta1_ci(self):
        return np.array([self.ci95[self._index(f"beta1[{j}]")] for j in range(1, self.beta1.size + 1)])

    @property
    def covariance_available(self):
        return self.covariance is not None and np.all(np.isfinite(self.covariance))

    def to_dict(self):
        est = self.estimates
        out = {
            "variant": self.variant,
            "parameters": [
                {
                    "name": name,
                    "estimate": float(self.theta[i]),
                    "se": float(self.se[i]),
                    "ci95": [float(self.ci95[i, 0]), float(self.ci95[i, 1])],
                }
                for i, name in enumerate(self.param_names)
            ],
            "loglik": float(self.loglik),
            "converged": bool(self.converged),
            "iterations": int(self.n_iter),
            "grad_norm": float(self.grad_norm),
            "condition_number": float(self.condition_number),
            "message": self.message,
        }
        if est.xi is not None:
            out["stratum_rates"] = [float(v) for v in est.xi]
            if self.xi_se is not None:
                out["stratum_rates_se"] = [float(v) for v in self.xi_se]
        return out
