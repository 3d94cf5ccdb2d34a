"""
Error hierarchy
Every failure the stack reports carries a CLI exit category.
"""


class TransPeftError(Exception):
    """Base class for all errors raised by the lab."""

    exit_code = 1
    category = "internal"


class ConfigError(TransPeftError):
    exit_code = 2
    category = "config"


class ShapeError(TransPeftError):
    category = "shape"


class NonFiniteError(TransPeftError):
    exit_code = 4
    category = "divergence"


class TapeError(TransPeftError):
    category = "tape"


class VocabularyError(TransPeftError):
    category = "vocabulary"


class ArchitectureMismatchError(TransPeftError):
    category = "architecture"


class CheckpointError(TransPeftError):
    category = "checkpoint"


class MissingArtifactError(TransPeftError):
    exit_code = 3
    category = "missing-artifact"


class TrainingDivergedError(NonFiniteError):
    """Loss went non-finite; `dump_path` points at the saved weights, if any."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class FrozenBaseViolation(TransPeftError):
    category = "frozen-base"


class AcceptanceFailure(TransPeftError):
    exit_code = 5
    category = "acceptance"
