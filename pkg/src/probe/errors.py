"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, NumericalError -> 3.
"""


class ProbeError(Exception):
    """Base class for all package errors."""


class ConfigError(ProbeError):
    """Invalid configuration or arguments supplied by the user."""


class DataError(ProbeError):
    """Invalid data content (bad values, inconsistent records)."""


class FormatError(DataError):
    """Malformed file. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DimensionError(DataError):
    """Shape mismatch between tensors or between model and data."""


class NumericalError(ProbeError):
    """Numerical failure (non-finite values, divergence)."""


class TrainingDivergenceError(NumericalError):
    """Training produced a non-finite loss or gradient."""


class StateError(ProbeError):
    """Operation called in a state that does not support it."""
