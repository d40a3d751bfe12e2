import math

import numpy as np
import pytest
from scipy.optimize import minimize

from matched_secondary.data import StratifiedDataset
from matched_secondary.estimation import (
    Z975,
    FitOptions,
    bfgs_maximize,
    fit,
    numerical_gradient,
    numerical_hessian,
    warm_start,
    zeros_start,
)
from matched_secondary.exceptions import ConvergenceError, InvalidInputError
from matched_secondary.naive import fit_naive
from matched_secondary.profile import ProfileObjective

from conftest import desk_dataset
from helpers import richardson_gradient


class TestNumericalDerivatives:
    def test_quadratic_gradient(self):
        g = numerical_gradient(lambda t: t @ t, np.array([1.0, 2.0]))
        np.testing.assert_allclose(g, [2.0, 4.0], atol=1e-8)

    def test_constant_gradient(self):
        np.testing.assert_allclose(numerical_gradient(lambda t: 3.7, np.array([0.5, -8.0, 1e3])), 0.0, atol=1e-9)

    def test_relative_step(self):
        # a large coordinate still gets an accurate slope
        g = numerical_gradient(lambda t: math.sin(t[0] / 1e4), np.array([2e4]))
        assert g[0] == pytest.approx(math.cos(2.0) / 1e4, rel=1e-6)

    def test_non_finite_names_component(self):
        f = lambda t: float(np.log(t[1]) + t[0])
        with np.errstate(invalid="ignore"), pytest.raises(InvalidInputError, match="component 1"):
            numerical_gradient(f, np.array([1.0, 5e-7]))

    def test_floor_falls_back_to_one_sided(self):
        # left of 0 the function is "infeasible"; the slope at 0 comes from the right
        f = lambda t: 2.0 * t[0] - t[1] ** 2 if t[0] >= 0 else -1e10
        g = numerical_gradient(f, np.array([0.0, 0.5]), h=1e-7, floor=-5e9)
        np.testing.assert_allclose(g, [2.0, -1.0], atol=1e-6)
        walled = lambda t: 0.0 if t[0] == 0 else -1e10
        assert numerical_gradient(walled, np.array([0.0]), floor=-5e9)[0] == 0.0

    def test_quadratic_hessian(self):
        A = np.array([[2.0, 1.0], [1.0, 3.0]])
        H = numerical_hessian(lambda t: 0.5 * t @ A @ t, np.array([0.3, -1.2]))
        np.testing.assert_allclose(H, A, atol=1e-6)
        np.testing.assert_array_equal(H, H.T)

    def test_one_dimensional_hessian(self):
        H = numerical_hessian(lambda t: -0.5 * t[0] ** 2, np.array([0.7]))
        assert H[0, 0] == pytest.approx(-1.0, abs=1e-6)
        assert np.linalg.inv(-H)[0, 0] == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("variant", ["PM1", "PM2", "PM3"])
def test_gradient_matchesrichardson_gradient(variant):
    data, pop = desk_dataset(0, n=100)
    rates = pop.stratum_rates if variant == "PM2" else None
    obj = ProfileObjective(data, variant, rates)
    base = warm_start(data, variant, rates)
    rng = np.random.default_rng(7)
    for _ in range(20):
        theta = base + rng.normal(scale=0.05, size=base.size)
        assert obj(theta) > -1e9
        g = numerical_gradient(obj, theta)
        ref = richardson_gradient(obj, theta)
        assert np.all(np.abs(g - ref) <= 1e-5 * np.maximum(np.abs(ref), 1.0))


class TestBfgs:
    def test_rosenbrock(self):
        f = lambda t: -((1 - t[0]) ** 2 + 100 * (t[1] - t[0] ** 2) ** 2)
        res = bfgs_maximize(f, np.array([-1.2, 1.0]), max_iter=2000)
        np.testing.assert_allclose(res.theta, [1.0, 1.0], atol=1e-4)
        assert np.all(np.diff(res.history) >= 0)

    def test_iteration_limit_is_reported(self):
        f = lambda t: -((1 - t[0]) ** 2 + 100 * (t[1] - t[0] ** 2) ** 2)
        res = bfgs_maximize(f, np.array([-1.2, 1.0]), max_iter=3)
        assert not res.converged
        assert "iteration limit" in res.message

    def test_infeasible_start(self):
        with pytest.raises(ConvergenceError):
            bfgs_maximize(lambda t: -1e11, np.zeros(2))


@pytest.fixture(scope="module")
def pm2_fit():
    data, pop = desk_dataset(1, n=200)
    return data, pop, fit(data, FitOptions(variant="PM2"), pop.stratum_rates)


class TestFit:
    def test_result_contract(self, pm2_fit):
        data, pop, res = pm2_fit
        assert res.converged and res.grad_norm < 1e-6
        assert res.covariance_available
        np.testing.assert_allclose(res.covariance, res.covariance.T)
        assert np.linalg.eigvalsh(res.covariance).min() > 0
        np.testing.assert_allclose(res.se, np.sqrt(np.diag(res.covariance)))
        half = (res.ci95[:, 1] - res.ci95[:, 0]) / 2
        np.testing.assert_allclose(half / res.se, Z975, rtol=1e-14)
        assert Z975 == pytest.approx(1.959964, abs=5e-7)
        for k, p in enumerate(res.p_masses):
            assert np.all(p > 0) and abs(p.sum() - 1) < 1e-8
            sl = data.slices[k]
            from oracles import disease_mixture

            est = res.estimates
            m1, _ = disease_mixture(data.x[sl], est.beta0[k], est.beta1, est.gamma0[k], est.gamma1, est.gamma2)
            assert p @ m1 == pytest.approx(pop.stratum_rates[k], abs=1e-6)

    def test_monotone_history(self, pm2_fit):
        data, pop, _ = pm2_fit
        obj = ProfileObjective(data, "PM2", pop.stratum_rates)
        res = bfgs_maximize(obj, zeros_start(data, "PM2", pop.stratum_rates))
        assert np.all(np.diff(res.history) >= 0)

    def test_loglik_is_profile_value(self, pm2_fit):
        data, pop, res = pm2_fit
        assert res.loglik == ProfileObjective(data, "PM2", pop.stratum_rates)(res.theta)

    def test_rates_required_only_for_pm2(self, pm2_fit):
        data, pop, _ = pm2_fit
        with pytest.raises(InvalidInputError):
            fit(data, FitOptions(variant="PM2"))
        with pytest.raises(InvalidInputError):
            fit(data, FitOptions(variant="PM1"), pop.stratum_rates)
        with pytest.raises(InvalidInputError):
            fit(data, FitOptions(variant="PM2"), [0.1])

    def test_user_supplied_start(self, pm2_fit):
        data, pop, res = pm2_fit
        again = fit(data, FitOptions(variant="PM2", init="user-supplied", initial_theta=res.theta), pop.stratum_rates)
        np.testing.assert_allclose(again.theta, res.theta, atol=1e-6)
        with pytest.raises(InvalidInputError):
            FitOptions(init="user-supplied")
        with pytest.raises(InvalidInputError):
            FitOptions(gtol=0)

    def test_pm3_reports_rates(self):
        data, pop = desk_dataset(2, n=200)
        res = fit(data, FitOptions(variant="PM3"))
        assert res.estimates.xi.shape == (2,)
        assert np.all((res.estimates.xi > 0) & (res.estimates.xi < 1))
        if res.covariance_available:
            lx = res.se[[res.param_names.index(f"logit_xi[{k}]") for k in (1, 2)]]
            xi = res.estimates.xi
            np.testing.assert_allclose(res.xi_se, xi * (1 - xi) * lx)


@pytest.mark.parametrize("variant", ["PM1", "PM2"])
def test_warm_start_independence(variant):
    for r in range(20):
        data, pop = desk_dataset(100 + r, n=200)
        rates = pop.stratum_rates if variant == "PM2" else None
        warm = fit(data, FitOptions(variant=variant), rates)
        cold = fit(data, FitOptions(variant=variant, init="zeros"), rates)
        assert warm.converged and cold.converged
        np.testing.assert_allclose(warm.theta, cold.theta, atol=1e-4)


def test_scale_equivariance():
    data, pop = desk_dataset(3, n=200)
    c = 3.0
    scaled = StratifiedDataset(d=data.d, z=data.z, y=data.y, x=data.x * c)
    for variant in ("PM1", "PM2"):
        rates = pop.stratum_rates if variant == "PM2" else None
        a = fit(data, FitOptions(variant=variant), rates)
        b = fit(scaled, FitOptions(variant=variant), rates)
        assert b.estimates.beta1[0] == pytest.approx(a.estimates.beta1[0] / c, abs=1e-4)
        assert b.estimates.gamma1[0] == pytest.approx(a.estimates.gamma1[0] / c, abs=1e-4)
        assert b.loglik == pytest.approx(a.loglik, abs=1e-6)


def test_unrelated_outcome_agreement():
    data, pop = desk_dataset(4, n=300, gamma2=0.0)
    naive = fit_naive(data, "adjusted2")
    b_naive, se = naive.coef[0], naive.se[0]
    for variant in ("PM1", "PM2", "PM3"):
        rates = pop.stratum_rates if variant == "PM2" else None
        res = fit(data, FitOptions(variant=variant), rates)
        assert abs(res.estimates.beta1[0] - b_naive) < 2 * se


def _grid_oracle(obj, lo=-3.0, hi=3.0, step=0.5):
    """Coarse grid over the four PM1 parameters, refined by Nelder-Mead from the best cells."""
    axis = np.arange(lo, hi + 1e-9, step)
    grid = np.stack(np.meshgrid(axis, axis, axis, axis, indexing="ij"), -1).reshape(-1, 4)
    vals = np.array([obj(t) for t in grid])
    best = None
    for j in np.argsort(vals)[::-1][:5]:
        res = minimize(lambda t: -obj(t), grid[j], method="Nelder-Mead",
                       options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 20_000, "maxfev": 40_000})
        if best is None or res.fun < best.fun:
            best = res
    return grid[int(np.argmax(vals))], best.x


def test_tiny_instance_grid_oracle():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(10, 1))
    d = np.array([1] * 5 + [0] * 5)
    y = np.array([1, 0, 1, 1, 0, 0, 1, 0, 0, 1])
    data = StratifiedDataset(d=d, z=np.ones(10), y=y, x=x)
    obj = ProfileObjective(data, "PM1")
    res = fit(data, FitOptions(variant="PM1"))
    coarse, refined = _grid_oracle(obj)
    assert np.all(np.abs(coarse) < 3.0)
    assert res.converged
    np.testing.assert_allclose(res.theta, refined, atol=0.02)
