"""Secondary-outcome regression for matched case-control studies.

Three profile-likelihood estimators (rare disease, known stratum rates,
unknown stratum rates) alongside naive conditional and unconditional
logistic comparators, plus a Monte Carlo harness for the sampling design.
"""

__version__ = "0.1.0"

from .data import FitResult, Observation, ParamLayout, ParamVector, StratifiedDataset
from .estimation import FitOptions, fit
from .estimators import ConditionalLogit, NaiveLogit, ProfileLikelihoodEstimator
from .exceptions import (
    ConvergenceError,
    InfeasibleParametersError,
    InnerSolverError,
    InvalidInputError,
    MatchedSecondaryError,
    RankDeficientError,
)
from .naive import conditional_logistic_fit, fit_naive, logistic_fit
from .profile import KnownRates, ProfileObjective, profile_loglik_pm1, profile_loglik_pm2, profile_loglik_pm3
from .simulation import SimConfig, generate_population, run_replicates, sample_matched_cc

__all__ = [
    "ConditionalLogit",
    "ConvergenceError",
    "FitOptions",
    "FitResult",
    "InfeasibleParametersError",
    "InnerSolverError",
    "InvalidInputError",
    "KnownRates",
    "MatchedSecondaryError",
    "NaiveLogit",
    "Observation",
    "ParamLayout",
    "ParamVector",
    "ProfileLikelihoodEstimator",
    "ProfileObjective",
    "RankDeficientError",
    "SimConfig",
    "StratifiedDataset",
    "conditional_logistic_fit",
    "fit",
    "fit_naive",
    "generate_population",
    "logistic_fit",
    "profile_loglik_pm1",
    "profile_loglik_pm2",
    "profile_loglik_pm3",
    "run_replicates",
    "sample_matched_cc",
]
