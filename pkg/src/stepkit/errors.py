"""Exception hierarchy shared across stepkit modules."""


class StepkitError(Exception):
    pass


class ConfigError(StepkitError, ValueError):
    """Invalid configuration value or combination."""


class DataError(StepkitError):
    """Malformed or inconsistent input data."""


class FormatError(DataError):
    """File does not follow the expected binary layout (magic, version, shape)."""


class CorruptionError(DataError):
    """File header is valid but the payload is truncated or damaged."""


class NumericError(StepkitError, ArithmeticError):
    """Non-finite values appeared during a computation."""
