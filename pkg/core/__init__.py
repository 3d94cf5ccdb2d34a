# Core package
# The orchestrator is imported explicitly (core.orchestrator) since it pulls in
# every stage of the stack; schemas and errors stay importable on their own.
from .errors import (
    TransPeftError, ConfigError, ShapeError, NonFiniteError, TapeError,
    VocabularyError, ArchitectureMismatchError, CheckpointError,
    MissingArtifactError, TrainingDivergedError, FrozenBaseViolation, AcceptanceFailure
)
from .models import (
    ModelConfig, PeftConfig, TransPeftConfig, OptimizerConfig, TaskSpec,
    MixtureSpec, UpdateConfig, ExperimentConfig, RunManifest, UpdatePair, BoundReport
)

__all__ = [
    'TransPeftError', 'ConfigError', 'ShapeError', 'NonFiniteError', 'TapeError',
    'VocabularyError', 'ArchitectureMismatchError', 'CheckpointError',
    'MissingArtifactError', 'TrainingDivergedError', 'FrozenBaseViolation', 'AcceptanceFailure',
    'ModelConfig', 'PeftConfig', 'TransPeftConfig', 'OptimizerConfig', 'TaskSpec',
    'MixtureSpec', 'UpdateConfig', 'ExperimentConfig', 'RunManifest', 'UpdatePair', 'BoundReport'
]
