"""Exception hierarchy. The CLI maps each family to an exit code."""


class ZSLError(Exception):
    pass


class ConfigError(ZSLError, ValueError):
    """Invalid hyperparameters, flags or config files."""


class DataError(ZSLError, ValueError):
    """Malformed or inconsistent input data."""


class DimensionError(DataError):
    def __init__(self, what, expected, actual):
        self.expected = expected
        self.actual = actual
        super().__init__(f"{what}: expected dimension {expected}, got {actual}")


class NumericError(ZSLError, ArithmeticError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None, step=None):
        self.epoch = epoch
        self.step = step
        super().__init__(message)
