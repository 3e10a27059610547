"""Exception types shared across the package."""


class GnnBenchError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GnnBenchError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class IndexBoundsError(GnnBenchError, IndexError):
    """A gather index or segment id lies outside its valid range."""


class UsageError(GnnBenchError, ValueError):
    """An operation was called with arguments that make it meaningless."""


class UndefinedMetricError(GnnBenchError, ValueError):
    """A metric is undefined for the given inputs (e.g. single-class AUC)."""


class DataError(GnnBenchError, ValueError):
    """Input data violates a structural invariant."""


class ConfigError(GnnBenchError, ValueError):
    """A configuration value is missing or inconsistent."""
