"""Exception types shared across the package."""


class CglMhaError(Exception):
    """Base class for all package errors."""


class ShapeError(CglMhaError, ValueError):
    pass


class ConfigError(CglMhaError, ValueError):
    pass


class ContractError(CglMhaError, ValueError):
    """A precondition of an operation was violated by its caller."""


class NumericError(CglMhaError, ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DataError(CglMhaError, ValueError):
    """Malformed dataset, embedding or vocabulary input."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(CglMhaError, ValueError):
    pass
