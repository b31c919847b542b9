"""
Exception hierarchy for DiffStereo scripts.

Every error a user can fix derives from DiffStereoError; the CLI maps those to exit
code 1 and anything else to exit code 2.
"""


class DiffStereoError(Exception):
    """Base class for user-facing errors."""


class DimensionError(DiffStereoError, ValueError):
    """Tensor shapes are incompatible (non-divisible dims, mismatched views)."""


class ParameterError(DiffStereoError, ValueError):
    """An argument is out of its valid range."""


class ConfigError(DiffStereoError):
    """A configuration is malformed or internally inconsistent."""


class CheckpointError(DiffStereoError):
    """A checkpoint archive is unreadable or does not fit the requested model."""


class DataError(DiffStereoError):
    """Input data is missing or unreadable."""


class TrainingDivergedError(DiffStereoError):
    """A training step produced a non-finite loss."""
