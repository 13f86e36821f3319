"""Exception hierarchy shared by every module."""


class UcanError(Exception):
    """Base class for library errors."""


class DimensionError(UcanError, ValueError):
    """Tensor shapes do not line up."""


class ConfigError(UcanError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(UcanError, ValueError):
    """A caller-supplied object violates a recorded contract (e.g. share shapes)."""


class NumericError(UcanError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class WeightFileError(UcanError, OSError):
    """A weight or tensor file is missing, truncated or corrupt.

    ``field`` names the manifest entry or header field that failed.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
