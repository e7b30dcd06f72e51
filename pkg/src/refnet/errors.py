"""Exception hierarchy shared by every refnet module."""


class RefNetError(Exception):
    """Base class for all errors raised by refnet."""


class DimensionError(RefNetError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(RefNetError, ValueError):
    """An input lies outside the domain of an operation (e.g. log of a non-positive entry)."""


class DegenerateVectorError(RefNetError, ValueError):
    """A vector whose norm is too small to normalise."""


class ConfigurationError(RefNetError, ValueError):
    """Model, loss or experiment configuration is invalid or inconsistent with the data."""


class RankDeficiencyError(RefNetError, ArithmeticError):
    """A linear system is singular; ``rank`` holds the numerically computed rank."""

    def __init__(self, message, rank=None):
        super().__init__(message)
        self.rank = rank


class DivergenceError(RefNetError, RuntimeError):
    """An iterative optimisation blew up (loss non-finite or above its divergence bound)."""


class SchemaError(RefNetError, ValueError):
    """An input file does not follow the expected schema."""
