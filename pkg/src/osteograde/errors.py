"""Exception types shared across the package.

The CLI maps these onto exit codes (see cli.py), so library code should
raise the most specific class that applies.
"""


class OsteogradeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(OsteogradeError):
    """Tensor shapes are inconsistent for the requested operation."""


class ConfigError(OsteogradeError):
    """Invalid or inconsistent configuration."""


class DataError(OsteogradeError):
    """Bad input data: manifests, images, labels."""


class NumericError(OsteogradeError):
    """Non-finite values where finite ones are required."""


class CheckpointError(OsteogradeError):
    """Malformed, truncated, or incompatible checkpoint file."""
