"""Monte Carlo harness: source population, matched case-control sampling, replicate summaries.

Random streams
--------------
All randomness derives from ``SimConfig.seed`` through
:class:`numpy.random.SeedSequence`: the population uses spawn key ``(0,)``
and replicate ``r`` uses spawn key ``(1, r)``.  Each replicate is therefore
reproducible on its own and independent of how replicates are scheduled
across workers.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import brentq
from scipy.special import expit

from .data import StratifiedDataset
from .estimation import FitOptions, fit
from .exceptions import InvalidInputError, MatchedSecondaryError
from .naive import NAIVE_METHODS, fit_naive
from .profile import KnownRates

COMPARISON_METHODS = ("conditional", "unadjusted", "adjusted1", "adjusted2", "PM1", "PM2", "PM3")
ALL_METHODS = NAIVE_METHODS + ("PM1", "PM2", "PM3")
SUMMARY_COLUMNS = ("method", "bias", "rb", "mean_se", "emp_sd", "mse_x100", "cp", "n_fail")
RECORD_COLUMNS = ("replicate", "method", "estimate", "se", "ci_low", "ci_high", "covers", "converged", "dataset_hash")
Z975 = 1.959963984540054


@dataclass(frozen=True)
class SimConfig:
    """Source population and sampling design.

    ``gamma0`` fixes the disease intercepts explicitly; otherwise a single
    intercept shared by all strata is calibrated so the population disease
    rate equals ``disease_rate``.
    """

    n_pop: int = 200_000
    stratum_split: tuple = (0.6, 0.4)
    beta0: tuple = (-1.0, -0.2)
    beta1: tuple = (math.log(2.0),)
    gamma1: tuple = (math.log(0.5),)
    gamma2: float = math.log(0.1)
    disease_rate: Optional[float] = 0.01
    gamma0: Optional[tuple] = None
    n_cases: int = 500
    n_controls: int = 500
    n_replicates: int = 1000
    seed: int = 20240601

    def __post_init__(self):
        for name in ("stratum_split", "beta0", "beta1", "gamma1"):
            object.__setattr__(self, name, tuple(float(v) for v in np.atleast_1d(getattr(self, name))))
        if self.gamma0 is not None:
            object.__setattr__(self, "gamma0", tuple(float(v) for v in np.atleast_1d(self.gamma0)))
        K = len(self.stratum_split)
        split = np.array(self.stratum_split)
        if K < 1 or np.any(split <= 0) or abs(split.sum() - 1) > 1e-9:
            raise InvalidInputError("stratum_split must be positive shares summing to 1")
        if len(self.beta0) != K:
            raise InvalidInputError(f"beta0 needs one intercept per stratum ({K})")
        if len(self.beta1) != len(self.gamma1):
            raise InvalidInputError("beta1 and gamma1 must have the same length")
        if self.gamma0 is None:
            if self.disease_rate is None or not 0 < self.disease_rate < 1:
                raise InvalidInputError("disease_rate must lie in (0, 1) when gamma0 is not given")
        elif len(self.gamma0) != K:
            raise InvalidInputError(f"gamma0 needs one intercept per stratum ({K})")
        if self.n_cases < 1 or self.n_controls < 1:
            raise InvalidInputError("n_cases and n_controls must be positive")
        if self.n_replicates < 1:
            raise InvalidInputError("n_replicates must be at least 1")
        if self.n_pop < 1:
            raise InvalidInputError("n_pop must be positive")

    @property
    def K(self):
        return len(self.stratum_split)

    @property
    def q(self):
        return len(self.beta1)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, values):
        known = set(cls.__dataclass_fields__)
        unknown = set(values) - known
        if unknown:
            raise InvalidInputError(f"unknown simulation settings: {sorted(unknown)}")
        return cls(**values)


def _quadrature(config, n_nodes=64):
    """Nodes and weights for E[f(beta1'X, gamma1'X)] with X ~ N(0, I)."""
    b = np.array(config.beta1)
    g = np.array(config.gamma1)
    cov = np.array([[b @ b, b @ g], [b @ g, g @ g]])
    vals, vecs = np.linalg.eigh(cov)
    A = vecs * np.sqrt(np.clip(vals, 0, None))
    t, w = hermegauss(n_nodes)
    w = w / w.sum()
    e1, e2 = np.meshgrid(t, t, indexing="ij")
    E = np.stack([e1.ravel(), e2.ravel()])
    uv = A @ E
    weights = np.outer(w, w).ravel()
    return uv[0], uv[1], weights


def expected_stratum_rates(config, gamma0):
    """Model-implied ``P(D = 1 | Z = k)`` for each stratum by Gauss-Hermite quadrature."""
    u, v, w = _quadrature(config)
    gamma0 = np.broadcast_to(np.asarray(gamma0, dtype=float), (config.K,))
    rates = []
    for k in range(config.K):
        py = expit(config.beta0[k] + u)
        pd = (1 - py) * expit(gamma0[k] + v) + py * expit(gamma0[k] + v + config.gamma2)
        rates.append(float(w @ pd))
    return np.array(rates)


def calibrate_gamma0(config, target_rate=None):
    """Common disease intercept giving overall population rate ``target_rate``.

    Returns one value per stratum (all equal).
    """
    target = config.disease_rate if target_rate is None else target_rate
    if target is None or not 0 < target < 1:
        raise InvalidInputError("target disease rate must lie in (0, 1)")
    split = np.array(config.stratum_split)

    def gap(g0):
        return float(split @ expected_stratum_rates(config, g0)) - target

    lo, hi = -30.0, 30.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise InvalidInputError(f"no common intercept in [{lo}, {hi}] reaches disease rate {target}")
    g0 = brentq(gap, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)
    return np.full(config.K, g0)


@dataclass(eq=False)
class Population:
    """Finite source population."""

    z: np.ndarray
    x: np.ndarray
    y: np.ndarray
    d: np.ndarray
    gamma0: np.ndarray
    stratum_rates: np.ndarray
    expected_rates: np.ndarray
    _pools: dict = field(default=None, repr=False)

    @property
    def K(self):
        return int(self.stratum_rates.size)

    def pools(self):
        if self._pools is None:
            self._pools = {
                (k, dv): np.flatnonzero((self.z == k) & (self.d == dv)) for k in range(1, self.K + 1) for dv in (0, 1)
            }
        return self._pools


def population_rng(config):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0,)))


def replicate_rng(config, replicate):
    return np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(1, int(replicate))))


def generate_population(config, rng=None):
    """Draw the source population: Z by the stratum split, X ~ N(0, I), then Y and D.

    Raises
    ------
    InvalidInputError
        If the intercept calibration fails.
    """
    rng = population_rng(config) if rng is None else rng
    gamma0 = np.array(config.gamma0) if config.gamma0 is not None else calibrate_gamma0(config)
    N, K = config.n_pop, config.K
    z = rng.choice(np.arange(1, K + 1), size=N, p=np.array(config.stratum_split)).astype(np.int64)
    x = rng.standard_normal((N, config.q))
    eta_y = np.array(config.beta0)[z - 1] + x @ np.array(config.beta1)
    y = (rng.random(N) < expit(eta_y)).astype(np.int8)
    eta_d = gamma0[z - 1] + x @ np.array(config.gamma1) + config.gamma2 * y
    d = (rng.random(N) < expit(eta_d)).astype(np.int8)
    counts = np.bincount(z, minlength=K + 1)[1:]
    cases = np.bincount(z, weights=d, minlength=K + 1)[1:]
    with np.errstate(invalid="ignore", divide="ignore"):
        rates = cases / counts
    return Population(z, x, y, d, gamma0, rates, expected_stratum_rates(config, gamma0))


def sample_matched_cc(population, n_cases, n_controls, rng):
    """Sample ``n_cases`` cases and ``n_controls`` controls without replacement in every stratum.

    Returns
    -------
    StratifiedDataset
        Rows ordered by stratum, cases first; ``row_index`` holds population indices.
    """
    pools = population.pools()
    picks = []
    for k in range(1, population.K + 1):
        for dv, size in ((1, n_cases), (0, n_controls)):
            pool = pools[(k, dv)]
            if pool.size < size:
                kind = "cases" if dv == 1 else "controls"
                raise InvalidInputError(f"stratum {k} has only {pool.size} {kind}; {size} requested")
            picks.append(rng.choice(pool, size=size, replace=False))
    idx = np.concatenate(picks)
    return StratifiedDataset(
        d=population.d[idx], z=population.z[idx], y=population.y[idx], x=population.x[idx], row_index=idx
    )


@dataclass
class MethodEstimate:
    estimate: float
    se: float
    converged: bool


def _estimate_from_fit(result):
    est = float(result.beta1[0])
    se = float(result.beta1_se[0])
    ok = bool(result.converged and result.covariance_available and math.isfinite(se))
    return MethodEstimate(est, se, ok)


def run_method(method, data, context):
    """Fit one named method (or call a custom estimator) on ``data``."""
    if callable(method):
        return method(data, context)
    if method in NAIVE_METHODS:
        res = fit_naive(data, method)
        return MethodEstimate(float(res.coef[0]), float(res.se[0]), bool(res.converged and np.isfinite(res.se[0])))
    if method in ("PM1", "PM3"):
        return _estimate_from_fit(fit(data, FitOptions(variant=method)))
    if method == "PM2":
        return _estimate_from_fit(fit(data, FitOptions(variant="PM2"), KnownRates(context["rates"])))
    raise InvalidInputError(f"unknown method {method!r}")


def _method_names(methods):
    names = []
    for m in methods:
        if isinstance(m, tuple):
            names.append(m[0])
        elif isinstance(m, str):
            if m not in ALL_METHODS:
                raise InvalidInputError(f"unknown method {m!r}; choose from {ALL_METHODS}")
            names.append(m)
        else:
            raise InvalidInputError("custom methods must be given as (name, callable) pairs")
    if len(set(names)) != len(names):
        raise InvalidInputError("method names must be unique")
    return names


@dataclass
class ReplicateRecord:
    replicate: int
    method: str
    estimate: float
    se: float
    converged: bool
    dataset_hash: str = ""

    @property
    def ci(self):
        return self.estimate - Z975 * self.se, self.estimate + Z975 * self.se


_WORKER = {}


def _init_worker(config, population, methods):
    _WORKER["args"] = (config, population, methods)


def _replicate(r, config=None, population=None, methods=None):
    if config is None:
        config, population, methods = _WORKER["args"]
    rng = replicate_rng(config, r)
    data = sample_matched_cc(population, config.n_cases, config.n_controls, rng)
    context = {"rates": population.stratum_rates, "truth": config.beta1[0], "replicate": r}
    digest = data.fingerprint()
    out = []
    for m in methods:
        name, fn = (m if isinstance(m, tuple) else (m, m))
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                res = run_method(fn, data, context)
        except MatchedSecondaryError:
            res = MethodEstimate(float("nan"), float("nan"), False)
        out.append(ReplicateRecord(r, name, float(res.estimate), float(res.se), bool(res.converged), digest))
    return out


@dataclass
class MethodSummary:
    method: str
    bias: float
    rb: float
    mean_se: float
    emp_sd: float
    mse_x100: float
    cp: float
    n_fail: int
    n_ok: int


def _mean(values):
    return math.fsum(values) / len(values)


def summarize(records, truth, methods=None):
    """Aggregate replicate records into Bias, RB, MeanSE, EmpSD, MSE x 100 and CP per method.

    Non-converged replicates are excluded from the moments and counted in
    ``n_fail``.  ``EmpSD`` uses the ``n - 1`` convention and is NaN for a
    single usable replicate; every statistic is NaN when no replicate
    converged.
    """
    truth = float(truth)
    if methods is None:
        methods = list(dict.fromkeys(r.method for r in records))
    rows = []
    for name in methods:
        recs = [r for r in records if r.method == name]
        ok = [r for r in recs if r.converged and math.isfinite(r.estimate) and math.isfinite(r.se)]
        n_fail = len(recs) - len(ok)
        if not ok:
            nan = float("nan")
            rows.append(MethodSummary(name, nan, nan, nan, nan, nan, nan, n_fail, 0))
            continue
        est = [r.estimate for r in ok]
        m = _mean(est)
        bias = m - truth
        rb = bias / truth if truth != 0 else float("nan")
        mean_se = _mean([r.se for r in ok])
        if len(est) > 1:
            emp_sd = math.sqrt(math.fsum((e - m) ** 2 for e in est) / (len(est) - 1))
        else:
            emp_sd = float("nan")
        mse = 100.0 * _mean([(e - truth) ** 2 for e in est])
        cp = _mean([1.0 if r.ci[0] <= truth <= r.ci[1] else 0.0 for r in ok])
        rows.append(MethodSummary(name, bias, rb, mean_se, emp_sd, mse, cp, n_fail, len(ok)))
    return rows


def format_value(v, exact=False):
    """Fixed textual encoding for tables: ``NA`` for missing, else 10 significant digits.

    ``exact=True`` writes the shortest round-trip representation instead.
    """
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v)) if exact else f"{float(v):.10g}"


@dataclass
class ReplicateSummary:
    config: SimConfig
    truth: float
    rows: list
    records: list
    stratum_rates: np.ndarray = None

    def row(self, method):
        for r in self.rows:
            if r.method == method:
                return r
        raise KeyError(method)

    def to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SUMMARY_COLUMNS)
        for r in self.rows:
            writer.writerow([r.method] + [format_value(getattr(r, c)) for c in SUMMARY_COLUMNS[1:]])
        return buf.getvalue() if fh is None else None

    def records_to_csv(self, fh=None):
        buf = io.StringIO() if fh is None else fh
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RECORD_COLUMNS)
        for rec in self.records:
            lo, hi = rec.ci
            covers = (lo <= self.truth <= hi) if math.isfinite(lo) else float("nan")
            writer.writerow(
                [rec.replicate, rec.method, format_value(rec.estimate, True), format_value(rec.se, True),
                 format_value(lo, True), format_value(hi, True), format_value(covers), int(rec.converged), rec.dataset_hash]
            )
        return buf.getvalue() if fh is None else None

    def table(self):
        head = f"{'method':<14}{'Bias':>9}{'RB':>9}{'MeanSE':>9}{'EmpSD':>9}{'MSE':>9}{'CP':>7}{'fail':>6}"
        lines = [head]
        for r in self.rows:
            cells = [r.bias, r.rb, r.mean_se, r.emp_sd, r.mse_x100]
            txt = "".join(f"{v:>9.3f}" if math.isfinite(v) else f"{'NA':>9}" for v in cells)
            cp = f"{r.cp:>7.2f}" if math.isfinite(r.cp) else f"{'NA':>7}"
            lines.append(f"{r.method:<14}{txt}{cp}{r.n_fail:>6d}")
        return "\n".join(lines)


def run_replicates(config, methods=COMPARISON_METHODS, workers=1, population=None):
    """Run every method on ``config.n_replicates`` matched samples and summarise.

    Parameters
    ----------
    config : SimConfig
    methods : sequence
        Method names from :data:`ALL_METHODS` and/or ``(name, callable)``
        pairs; a callable receives ``(dataset, context)`` and returns a
        :class:`MethodEstimate`.
    workers : int
        Process-pool size.  Output does not depend on it.
    population : Population, optional
        Reuse an existing population instead of generating one from the seed.
    """
    methods = list(methods)
    if not methods:
        raise InvalidInputError("methods must be non-empty")
    names = _method_names(methods)
    if population is None:
        population = generate_population(config)
    reps = range(config.n_replicates)
    if workers <= 1:
        chunks = [_replicate(r, config, population, methods) for r in reps]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(config, population, methods)) as ex:
            chunks = list(ex.map(_replicate, reps, chunksize=max(1, config.n_replicates // (4 * workers))))
    records = [rec for chunk in chunks for rec in chunk]
    records.sort(key=lambda r: (r.replicate, names.index(r.method)))
    truth = config.beta1[0]
    return ReplicateSummary(config, truth, summarize(records, truth, names), records, population.stratum_rates)


def read_records(fh):
    """Parse a per-replicate long-format dump written by :meth:`ReplicateSummary.records_to_csv`."""
    reader = csv.DictReader(fh)
    missing = set(RECORD_COLUMNS) - set(reader.fieldnames or [])
    if missing:
        raise InvalidInputError(f"replicate file lacks columns {sorted(missing)}")

    def num(s):
        return float("nan") if s == "NA" else float(s)

    return [
        ReplicateRecord(int(row["replicate"]), row["method"], num(row["estimate"]), num(row["se"]),
                        row["converged"] == "1", row["dataset_hash"])
        for row in reader
    ]
