"""Exception types shared across the library."""


class DotaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DotaError, ValueError):
    """Mode sizes, factor products, or ranks are inconsistent."""


class ParameterError(DotaError, ValueError):
    """A configuration value is out of its valid range."""


class NumericError(DotaError, ArithmeticError):
    """Non-finite input or a failed matrix factorization."""


class FormatError(DotaError, ValueError):
    """A binary file is corrupt, truncated, or internally inconsistent."""
