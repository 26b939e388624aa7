"""Exception types shared across the package.

The CLI maps these onto process exit codes (see ``bttf.cli``).
"""


class BTTFError(Exception):
    """Base class for all package errors."""


class ShapeError(BTTFError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(BTTFError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(BTTFError, ValueError):
    """Invalid configuration. ``fields`` lists every offending field name."""

    def __init__(self, message, fields=()):
        super().__init__(message)
        self.fields = list(fields)


class DataError(BTTFError, ValueError):
    """Input data is unusable (empty, non-finite, too short)."""


class SchemaError(DataError):
    """A required column is missing from an input file."""

    def __init__(self, column):
        super().__init__(f"missing required column: {column!r}")
        self.column = column


class NumericError(BTTFError, ArithmeticError):
    """NaN/inf encountered where finite values are required."""
