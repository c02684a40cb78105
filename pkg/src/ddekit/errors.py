"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class DdekitError(Exception):
    exit_code = 1


class ConfigurationError(DdekitError, ValueError):
    exit_code = 2


class DimensionError(ConfigurationError):
    pass


class NumericError(DdekitError, ArithmeticError):
    exit_code = 3


class DivergenceError(NumericError):
    """Raised when a forward or backward solve produces a non-finite value."""

    def __init__(self, message, t=None):
        super().__init__(message if t is None else f"{message} (t={t:.9g})")
        self.t = t


class OutOfRangeError(DdekitError, ValueError):
    exit_code = 2


class DataFormatError(DdekitError, OSError):
    exit_code = 4
