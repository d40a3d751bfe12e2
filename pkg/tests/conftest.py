from functools import lru_cache

import pytest

from matched_secondary.simulation import SimConfig, generate_population, replicate_rng, sample_matched_cc


@lru_cache(maxsize=None)
def population(rate=0.05, n_pop=200_000, seed=20240601, gamma2=None):
    kwargs = {"disease_rate": rate, "n_pop": n_pop, "seed": seed}
    if gamma2 is not None:
        kwargs["gamma2"] = gamma2
    cfg = SimConfig(**kwargs)
    return cfg, generate_population(cfg)


def desk_dataset(r, rate=0.05, n=200, **kwargs):
    """Replicate ``r`` of the standard design with ``n`` cases and ``n`` controls per stratum."""
    cfg, pop = population(rate, **kwargs)
    return sample_matched_cc(pop, n, n, replicate_rng(cfg, r)), pop


@pytest.fixture
def small_population():
    return population(0.05, 100_000)


# criterion number -> (passed, one-line description); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, text = ACCEPTANCE[num]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {num}: {text}")
