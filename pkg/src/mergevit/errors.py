"""Exception hierarchy shared across the package."""


class MergevitError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(MergevitError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(MergevitError):
    """A value lies outside the domain an operation accepts."""


class EvaluationError(MergevitError):
    """A function produced a non-finite value where a finite one is required."""


class UnsupportedResolutionError(MergevitError):
    """Input token grid is smaller than the target grid."""


class InvalidGridError(MergevitError):
    """A merge grid contains no real tokens."""


class ConfigError(MergevitError):
    """Malformed or unknown configuration."""


class CheckpointError(MergevitError):
    """Base class for checkpoint I/O failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated, mangled, or fails its CRC."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class TrainingDiverged(MergevitError):
    """Training produced a non-finite loss."""
