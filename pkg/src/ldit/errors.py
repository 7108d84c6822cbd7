"""Exception hierarchy shared across the package.

The CLI maps ``ValidationError`` (and its subclasses) to exit code 1 and
``RuntimeFailure`` subclasses to exit code 2.
"""

from __future__ import annotations


class LditError(Exception):
    pass


class ValidationError(LditError, ValueError):
    """Bad input: violated precondition, malformed value, out-of-range box."""


class DimensionError(ValidationError):
    pass


class CapacityError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class LoadError(ValidationError):
    pass


class RuntimeFailure(LditError, RuntimeError):
    pass


class NumericError(RuntimeFailure, ArithmeticError):
    pass


class GenerationError(RuntimeFailure):
    pass
