"""Exception types shared across the package."""


class CrossbrainError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CrossbrainError, ValueError):
    """Array shapes do not satisfy an operation's contract."""


class ParameterError(CrossbrainError, ValueError):
    """A numeric argument is outside its valid range."""


class ConfigError(CrossbrainError, ValueError):
    """A configuration object or file is invalid or inconsistent."""


class UnknownSubjectError(CrossbrainError, KeyError):
    """A subject id is not registered in the model or cohort."""


class FormatError(CrossbrainError, ValueError):
    """A binary container is malformed; the message names the byte offset."""


class NumericalError(CrossbrainError, ArithmeticError):
    """A NaN or Inf appeared where finite values are required."""


class NormalizationError(CrossbrainError, ValueError):
    """A row with (near-)zero norm cannot be L2-normalized."""


class UsageError(CrossbrainError, ValueError):
    """An API was called in an unsupported way (e.g. backward on a non-scalar)."""
