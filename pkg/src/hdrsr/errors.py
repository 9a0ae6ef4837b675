"""Exception types shared across the package."""


class HdrsrError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(HdrsrError):
    """Array has the wrong rank, dimensions, or channel count."""


class RangeError(HdrsrError):
    """Sample values violate a documented range precondition."""


class ParameterError(HdrsrError):
    """A scalar argument is outside its legal range."""


class DecodeError(HdrsrError):
    """An input file could not be parsed."""


class WriteError(HdrsrError):
    """An output file could not be written."""


class FormatError(HdrsrError):
    """A binary container (weights, patch store) is malformed."""


class SizeError(HdrsrError):
    """A problem instance is too large for the requested code path."""


class DataError(HdrsrError):
    """Dataset contents are unusable (missing pairs, empty store, ...)."""


class ConfigError(HdrsrError):
    """A configuration object or file is inconsistent."""


class StateError(HdrsrError):
    """An operation was called in the wrong order (e.g. backward before forward)."""


class SolverError(HdrsrError):
    """The iterative solver diverged or failed to converge.

    Carries the last relative residual when one is available.
    """

    def __init__(self, message: str, residual: float | None = None):
        super().__init__(message)
        self.residual = residual


class TrainingError(HdrsrError):
    """Training hit a non-recoverable numerical state."""
