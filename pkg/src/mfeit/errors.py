"""Exception types shared across the package."""


class MfeitError(Exception):
    """Base class for all package errors."""


class ConfigError(MfeitError, ValueError):
    """Invalid user input or experiment configuration."""


class MeshError(MfeitError, ValueError):
    """Mesh construction or electrode placement failed."""


class RankError(MfeitError, ValueError):
    """A spectral matrix lacks the rank needed for decoupling.

    Attributes
    ----------
    rank : int
        Numerical rank that was detected.
    condition : float
        Ratio of largest to smallest retained singular value.
    """

    def __init__(self, message, rank=None, condition=None):
        super().__init__(message)
        self.rank = rank
        self.condition = condition


class SolverError(MfeitError, ArithmeticError):
    """Numerical failure inside a forward or inverse solver."""
