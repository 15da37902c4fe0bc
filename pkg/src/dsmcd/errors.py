class ConfigError(ValueError):
    """Invalid configuration or inputs (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """Non-finite values during training or evaluation (CLI exit code 3)."""
