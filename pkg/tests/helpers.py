"""Checks shared by the unit tests and the acceptance gate (these call into the package)."""

import numpy as np
from scipy.optimize import brentq
from scipy.special import expit

from matched_secondary.data import ParamVector
from matched_secondary.profile import ProfileObjective

from oracles import disease_mixture, max_over_logit, stratum_arrays


def with_xi(theta, xi):
    return ParamVector(theta.beta0, theta.beta1, theta.gamma0, theta.gamma1, theta.gamma2, xi=xi)


def pm3_max_over_xi(theta, data):
    """Maximise the PM3 objective over each stratum's rate (strata separate additively)."""
    obj = ProfileObjective(data, "PM3")
    total = 0.0
    for k in range(data.K):
        def f(t, k=k):
            xi = np.full(data.K, 0.5)
            xi[k] = expit(t)
            return obj.evaluate(with_xi(theta, xi), details=True)[1]["contributions"][k]

        total += max_over_logit(f)
    return total


def argmax_rate(data, theta, k):
    """Rate maximising stratum k's PM3 term; the masses normalise only there.

    Solves the stationarity condition in ``xi`` by brentq inside the bracket
    around the best point of a logit grid.
    """
    d, _, x = stratum_arrays(data, k)
    b1, b0 = disease_mixture(x, theta.beta0[k], theta.beta1, theta.gamma0[k], theta.gamma1, theta.gamma2)
    n1, n0 = d.sum(), d.size - d.sum()

    def dF(t):
        xi = expit(t)
        p = 1.0 / (n1 * b1 / xi + n0 * b0 / (1 - xi))
        A, B = n1 * (p @ b1) / xi, n0 * (p @ b0) / (1 - xi)
        return (-n1 + A) / xi + (n0 - B) / (1 - xi)

    grid = np.linspace(-14, 10, 241)
    vals = np.array([dF(t) for t in grid])
    j = np.flatnonzero((vals[:-1] > 0) & (vals[1:] <= 0))[0]
    return expit(brentq(dF, grid[j], grid[j + 1], xtol=1e-14, rtol=1e-15))


def richardson_gradient(f, theta, h=1e-3):
    steps = h * np.maximum(1.0, np.abs(theta))
    out = np.empty(theta.size)
    for j in range(theta.size):
        e = np.zeros(theta.size)
        e[j] = steps[j]
        d1 = (f(theta + e) - f(theta - e)) / (2 * steps[j])
        d2 = (f(theta + e / 2) - f(theta - e / 2)) / steps[j]
        out[j] = (4 * d2 - d1) / 3
    return out
