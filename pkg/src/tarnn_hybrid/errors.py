"""Exception hierarchy shared across the pipeline."""


class TarnnError(Exception):
    """Base class for all pipeline errors."""

    exit_code = 1
    kind = "internal"


class ConfigError(TarnnError, ValueError):
    exit_code = 3
    kind = "config"


class DataError(TarnnError, ValueError):
    exit_code = 4
    kind = "data"


class ParseError(DataError):
    """Malformed input row. ``row`` is the 1-based line number in the file."""

    kind = "parse"

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class FormatError(DataError):
    kind = "format"


class NumericError(TarnnError, ArithmeticError):
    exit_code = 5
    kind = "numeric"


class TrainingError(TarnnError, RuntimeError):
    exit_code = 5
    kind = "training"


class UndefinedMetricError(TarnnError, ValueError):
    kind = "metric"


class DegenerateTestError(TarnnError, ValueError):
    kind = "degenerate"


class DomainError(TarnnError, ValueError):
    kind = "domain"


class SchemaError(TarnnError):
    """A serialized document failed validation; indicates a bug upstream."""

    kind = "schema"
