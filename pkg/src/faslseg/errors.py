"""Exception types shared across the package."""


class FaslSegError(Exception):
    """Base class for all package errors."""


class DimensionError(FaslSegError, ValueError):
    """Tensor extents are incompatible with an operation."""


class ContractError(FaslSegError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(FaslSegError, ValueError):
    """A model, loss or training configuration is invalid."""


class DataError(FaslSegError, OSError):
    """A dataset on disk is missing files or holds invalid values."""


class NumericalError(FaslSegError, ArithmeticError):
    """A loss or gradient became non-finite during training."""
