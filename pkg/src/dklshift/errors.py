"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage/config problems -> 1,
data/format problems -> 2, numeric failures -> 3.
"""


class DklShiftError(Exception):
    """Base class for all package errors."""


class ConfigError(DklShiftError):
    """Invalid configuration value or preset."""


class ContractError(DklShiftError):
    """An operation was called outside its contract (e.g. non-scalar root)."""


class DimensionError(DklShiftError):
    """Array shapes incompatible with the requested operation."""


class NumericError(DklShiftError):
    """NaN/Inf produced, or a numeric routine diverged."""


class DecompositionError(NumericError):
    """Cholesky factorization failed even after jitter retry."""


class StateError(DklShiftError):
    """A model/variational state violates its invariants."""


class FormatError(DklShiftError):
    """A file or record does not match its declared schema."""


class UndefinedMetricError(DklShiftError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""
