"""Exception hierarchy shared across the package."""


class TailfuseError(Exception):
    """Base class for all package errors."""


class FormatError(TailfuseError):
    """Malformed tensor or manifest file."""


class ConfigError(TailfuseError, ValueError):
    """Invalid configuration value."""


class PartitionError(TailfuseError):
    """Head/tail partition is empty or not a cover."""


class ShapeError(TailfuseError, ValueError):
    """Array shape does not match the expected layout."""


class NumericError(TailfuseError, ValueError):
    """NaN or Inf where finite values are required."""


class TrainingError(TailfuseError):
    """Training produced a non-finite loss or diverged."""


class MetricError(TailfuseError, ValueError):
    """Metric is undefined for the given input."""
