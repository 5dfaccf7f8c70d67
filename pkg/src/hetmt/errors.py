"""Exception types shared across the package."""


class HetmtError(Exception):
    """Base class for all errors raised by this package."""


class VolumeError(HetmtError):
    """Malformed volume file or inconsistent volume metadata."""


class PhantomError(HetmtError):
    """Phantom generation failed (invalid spec or organ placement)."""


class ConfigError(HetmtError):
    """Invalid or inconsistent configuration."""


class NumericError(HetmtError):
    """Non-finite values encountered where finite ones are required."""


class TrainingError(HetmtError):
    """Training aborted (e.g. non-finite loss)."""


class MetricsError(HetmtError):
    """Metric preconditions violated (empty mask, degenerate variance, ...)."""
