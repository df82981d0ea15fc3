"""Exception hierarchy shared by every module."""


class DrndError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(DrndError, ValueError):
    """Invalid sizes, ranges, or settings."""


class ShapeError(DrndError, ValueError):
    """Array dimensions disagree with what an operation expects."""


class NumericError(DrndError, ArithmeticError):
    """A NaN or Inf appeared where a finite value is required."""


class DegenerateError(DrndError, ValueError):
    """A distribution has (numerically) zero spread or zero mass."""


class UsageError(DrndError, RuntimeError):
    """An object was used out of protocol (e.g. stepping a finished episode)."""
