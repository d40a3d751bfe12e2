"""Exception hierarchy shared across the package."""


class MatchedSecondaryError(Exception):
    """Base class for all package errors."""


class InvalidInputError(MatchedSecondaryError, ValueError):
    """Malformed data, parameters or configuration."""


class InfeasibleParametersError(MatchedSecondaryError):
    """The parameters put a covariate mass outside (0, 1]."""


class InnerSolverError(MatchedSecondaryError):
    """A per-stratum inner equation could not be solved.

    Parameters
    ----------
    stratum : int
        1-based stratum index.
    """

    def __init__(self, stratum, message):
        super().__init__(f"stratum {stratum}: {message}")
        self.stratum = stratum


class RankDeficientError(InvalidInputError):
    """Design matrix is not of full column rank."""

    def __init__(self, columns):
        self.columns = list(columns)
        super().__init__(f"design matrix is rank deficient; collinear columns: {self.columns}")


class ConvergenceError(MatchedSecondaryError):
    """Outer optimisation could not produce a usable optimum."""
