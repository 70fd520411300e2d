"""Statistics-guided model merging with label-free coefficient learning."""

from __future__ import annotations

from .checkpoint import ArchSpec, CheckpointMeta, Dataset, ModelCheckpoint, fine_tune, forward, init_checkpoint
from .coefficients import CoefficientTable, normalize
from .distill import DistillConfig, PseudoLabeledSet, generate_pseudo_labels, hetero_distill
from .errors import CompatibilityError, FormatError, ParameterError, ShapeError, StageError, StatsMergingError
from .harness import TaskSuiteConfig, evaluate, export_heatmap, gen_tasks, run_experiment, run_hetero_experiment
from .learner import SMLParams, SMLTrainConfig, predict_coefficients, train_sml
from .merge import MergeRequest, merge, stats_merge, task_arithmetic, ties_merge, weight_average
from .numerics import OptimizerState, adam_step, svd_values
from .stats import StatsConfig, WeightStats, feature_vector, layer_stats, task_stats

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "CheckpointMeta",
    "CoefficientTable",
    "CompatibilityError",
    "Dataset",
    "DistillConfig",
    "FormatError",
    "MergeRequest",
    "ModelCheckpoint",
    "OptimizerState",
    "ParameterError",
    "PseudoLabeledSet",
    "SMLParams",
    "SMLTrainConfig",
    "ShapeError",
    "StageError",
    "StatsConfig",
    "StatsMergingError",
    "TaskSuiteConfig",
    "WeightStats",
    "adam_step",
    "evaluate",
    "export_heatmap",
    "feature_vector",
    "fine_tune",
    "forward",
    "gen_tasks",
    "generate_pseudo_labels",
    "hetero_distill",
    "init_checkpoint",
    "layer_stats",
    "merge",
    "normalize",
    "predict_coefficients",
    "run_experiment",
    "run_hetero_experiment",
    "stats_merge",
    "svd_values",
    "task_arithmetic",
    "task_stats",
    "ties_merge",
    "train_sml",
    "weight_average",
]
