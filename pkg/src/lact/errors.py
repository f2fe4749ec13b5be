"""Exception hierarchy shared by all modules."""


class LactError(Exception):
    """Base class for every error raised by lact."""


class ShapeError(LactError, ValueError):
    """Operands have incompatible shapes."""


class ConfigError(LactError, ValueError):
    """A configuration is invalid or does not match a checkpoint."""


class FormatError(LactError, ValueError):
    """A file or checkpoint is malformed, truncated or of the wrong version."""


class DataError(LactError):
    """Input data is missing, inconsistent or cannot be generated."""


class NumericalError(LactError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""
