"""Temporal recalibration of snapshot classifiers on synthetic progression data."""

from .errors import (
    ConfigurationError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    GradientStateError,
    MissingArtifactError,
    ParameterError,
    ProgrecalError,
    TrainingSetupError,
)
from .harness import ExperimentConfig, ablate, default_config, run_full_pipeline
from .losses import (
    ALIGNMENT_LOSSES,
    bhattacharyya_posterior_loss,
    coral_loss,
    kl_posterior_loss,
    mmd_loss,
)
from .recal import RecalConfig, RecalModel, finetune
from .snapshot import SnapshotConfig, SnapshotEncoder, snapshot_pretrain
from .synthdata import SynthConfig, make_datasets
from .temporal import TemporalClassifier, TemporalConfig, temporal_pretrain
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "ALIGNMENT_LOSSES",
    "ConfigurationError",
    "ContractError",
    "DegenerateInputError",
    "DimensionError",
    "ExperimentConfig",
    "GradientStateError",
    "MissingArtifactError",
    "ParameterError",
    "ProgrecalError",
    "RecalConfig",
    "RecalModel",
    "SnapshotConfig",
    "SnapshotEncoder",
    "SynthConfig",
    "TemporalClassifier",
    "TemporalConfig",
    "Tensor",
    "TrainingSetupError",
    "ablate",
    "bhattacharyya_posterior_loss",
    "coral_loss",
    "default_config",
    "finetune",
    "kl_posterior_loss",
    "make_datasets",
    "mmd_loss",
    "run_full_pipeline",
    "snapshot_pretrain",
    "temporal_pretrain",
]
