"""Error taxonomy shared by every subsystem.

DimensionError / ContractError map to CLI exit code 1, NumericalError to
exit code 2.
"""


class DimensionError(ValueError):
    """Tensor or array extents do not satisfy an operation's requirements."""


class ContractError(RuntimeError):
    """An API was called in a state its contract forbids."""


class ConfigError(ValueError):
    """A run configuration or mode string is invalid."""


class NumericalError(ArithmeticError):
    """A computation produced NaN/Inf or failed a numerical check."""
