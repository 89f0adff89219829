"""Exception types mapped to CLI exit codes (input -> 1, numerical -> 2)."""

from .tensor import NonFiniteError, ShapeError


class InputError(ValueError):
    """An input violates an operation's preconditions."""


class ConfigError(ValueError):
    """Configuration values are inconsistent or unknown."""


class NumericalError(RuntimeError):
    """Training diverged or produced non-finite values."""


__all__ = ["InputError", "ConfigError", "NumericalError", "NonFiniteError", "ShapeError"]
