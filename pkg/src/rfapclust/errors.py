"""Exception types; the CLI maps each to its own exit code."""


class ConfigError(ValueError):
    """Invalid configuration or argument (exit code 2)."""


class DataError(ValueError):
    """Malformed, missing or inconsistent input data (exit code 3)."""


class NumericError(FloatingPointError):
    """Non-finite values during training (exit code 4)."""
