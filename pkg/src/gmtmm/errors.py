"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class GmtmmError(Exception):
    """Base class for all package errors."""


class ConfigError(GmtmmError, ValueError):
    """Malformed model configuration or design (CLI exit code 2)."""


class DataError(GmtmmError, ValueError):
    """Data that cannot be ingested or does not fit the design (exit code 3)."""


class NumericalError(GmtmmError, ArithmeticError):
    """Underflow, singular information, failed optimization (exit code 4)."""


class SingularInformationError(NumericalError):
    """Information matrix is rank deficient; carries the null directions."""

    def __init__(self, message, directions=None, names=None):
        super().__init__(message)
        self.directions = directions
        self.names = names
