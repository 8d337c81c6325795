"""Exception types shared across the package."""


class MMCLError(Exception):
    """Base class for all package errors."""


class ShapeError(MMCLError, ValueError):
    """Operand shapes are incompatible."""


class EmptyAxisError(MMCLError, ValueError):
    """Reduction over an axis of length zero."""


class DegenerateVectorError(MMCLError, ValueError):
    """A zero vector was passed where a direction is required."""


class ContractError(MMCLError, ValueError):
    """A documented precondition was violated."""


class InputError(MMCLError, ValueError):
    """Model input does not match the configured modality layout."""


class DatasetParseError(MMCLError, ValueError):
    """A dataset file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(MMCLError, ValueError):
    """Records in a dataset file disagree with the manifest."""


class ConfigError(MMCLError, ValueError):
    """Invalid run configuration."""


class NumericError(MMCLError, ArithmeticError):
    """A computation produced non-finite values or failed a numeric check."""
