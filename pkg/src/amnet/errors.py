"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes (2 configuration, 3 data,
4 numeric), so every failure a user can trigger should raise one of them.
"""


class AmnetError(Exception):
    """Base class for all package errors."""


class ConfigError(AmnetError, ValueError):
    """Invalid configuration, MaskSpec, or incompatible checkpoint."""


class DataError(AmnetError, ValueError):
    """Malformed or insufficient input data."""


class SchemaError(DataError):
    """A CSV header is missing a required column."""


class ParseError(DataError):
    """A CSV row could not be parsed."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class DomainError(AmnetError, ValueError):
    """A scalar argument is outside the function's domain."""


class DimensionError(AmnetError, ValueError):
    """Tensor shapes are incompatible for an operation."""


class NumericError(AmnetError, FloatingPointError):
    """NaN or otherwise non-finite values where finite ones are required."""


class CheckpointError(AmnetError, ValueError):
    """A checkpoint file is corrupt or of an unsupported version."""
