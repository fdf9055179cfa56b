"""Exception hierarchy. Each class carries a short ``category`` used by the CLI."""


class AdaPruneError(Exception):
    category = "error"


class DimensionError(AdaPruneError, ValueError):
    category = "dimension"


class ConfigError(AdaPruneError, ValueError):
    category = "config"


class UsageError(AdaPruneError, RuntimeError):
    category = "usage"


class NonFiniteError(AdaPruneError, FloatingPointError):
    category = "non-finite"


class InvariantError(AdaPruneError, AssertionError):
    category = "invariant"


class CoverageError(AdaPruneError, ValueError):
    category = "coverage"


class CorruptFileError(AdaPruneError, ValueError):
    category = "corrupt-file"


class MissingFileError(AdaPruneError, FileNotFoundError):
    category = "not-found"


class PrerequisiteError(AdaPruneError, FileNotFoundError):
    category = "prerequisite"


class CheckpointError(AdaPruneError):
    category = "checkpoint"


class CheckpointVersionError(CheckpointError):
    category = "checkpoint-version"


class CheckpointTruncatedError(CheckpointError):
    category = "checkpoint-truncated"


class CheckpointShapeError(CheckpointError):
    category = "checkpoint-shape"
