"""
Exception hierarchy.

The CLI maps the three top-level families to exit codes:
ConfigurationError -> 2, DataError -> 3, NumericError -> 4.
"""

from typing import Optional


class MedlUqError(Exception):
    """Base class for all errors raised by this package."""

    exit_code: int = 1


class ArgumentError(MedlUqError, ValueError):
    """Raised when a function receives an argument outside its contract."""

    exit_code = 2


class ConfigurationError(MedlUqError):
    """Raised for shape mismatches and invalid experiment configuration."""

    exit_code = 2


class DataError(MedlUqError):
    """Raised when input data cannot be used."""

    exit_code = 3


class CsvParseError(DataError):
    """Raised when a CSV cell cannot be parsed."""

    def __init__(self, path: str, row: int, column: str, value: str):
        self.path = path
        self.row = row
        self.column = column
        self.value = value
        super().__init__(
            f"{path}: row {row}, column '{column}': cannot parse {value!r} as a number"
        )


class SplitError(DataError):
    """Raised when a split violates seen/unseen hygiene."""


class StratificationError(DataError):
    """Raised when a cluster is too small to stratify."""

    def __init__(self, cluster: str, size: int, required: int):
        self.cluster = cluster
        self.size = size
        self.required = required
        super().__init__(
            f"cluster '{cluster}' has {size} samples, at least {required} required"
        )


class MetricError(DataError):
    """Raised when a metric is undefined for the given labels."""


class NumericError(MedlUqError):
    """Raised when a computation produces non-finite values."""

    exit_code = 4

    def __init__(self, message: str, layer: Optional[int] = None):
        self.layer = layer
        if layer is not None:
            message = f"{message} (layer {layer})"
        super().__init__(message)


class TrainingError(NumericError):
    """Raised when training diverges."""

    def __init__(self, message: str, epoch: int):
        self.epoch = epoch
        super().__init__(f"{message} at epoch {epoch}")


class SwagDivergenceError(NumericError):
    """Raised when constant-lr SGD iterates leave the finite range."""

    def __init__(self, lr: float, epoch: int):
        self.lr = lr
        self.epoch = epoch
        super().__init__(
            f"SWAG collection diverged at epoch {epoch} with lr={lr}; "
            "the model left the local minimum, sampling aborted"
        )
