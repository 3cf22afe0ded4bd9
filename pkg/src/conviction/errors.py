"""Exception types raised by the toolkit."""


class ConvictionError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ConvictionError, ValueError):
    pass


class InvalidRatioError(ConvictionError, ValueError):
    pass


class DimensionMismatchError(ConvictionError, ValueError):
    pass


class UndefinedReferenceError(ConvictionError, ValueError):
    """Raised when a relative error is requested against an all-zero reference."""


class LineSearchError(ConvictionError, RuntimeError):
    """Backtracking exceeded its cap.

    Finite backtracking is guaranteed for a correct gradient, so hitting the
    cap almost always points at an inconsistent gradient implementation.
    """


class ConfigError(ConvictionError, ValueError):
    pass
