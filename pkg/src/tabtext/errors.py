"""Exception types shared across the toolkit."""


class TabTextError(Exception):
    """Base class for all toolkit errors."""


class DataError(TabTextError):
    """Malformed input data or on-disk artifacts."""


class SchemaError(DataError):
    """Schema definition or header mismatch problems."""


class RowError(DataError):
    """A data row violates the schema; carries the 1-based file line."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


class LabelError(DataError):
    """Label cell cannot be mapped to a binary class."""


class SizeError(DataError):
    """A requested split or subsample size is infeasible."""


class FormatError(DataError):
    """Corrupt, truncated, or mis-versioned file."""


class ContractError(TabTextError):
    """An operation was called outside its documented contract."""


class UndefinedMetricError(ContractError):
    """Metric is undefined for the given inputs (e.g. single-class AUC)."""


class NumericError(TabTextError):
    """Non-finite values encountered during computation."""
