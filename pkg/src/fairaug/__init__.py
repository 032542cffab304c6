"""Fairness-aware graph augmentation for implicit-feedback recommenders.

The package learns which user-item edges to add to a training graph so
that a frozen collaborative-filtering model closes its ranking-quality gap
between two demographic groups, without retraining the model itself.
"""

__version__ = "0.1.0"

from .augmenter import AugmentationConfig, augment, apply_augmentation
from .config import ExperimentConfig, PolicyCell, config_hash, load_config
from .data import InteractionSchema, ingest, partition_users, temporal_split
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    EmptyCandidatesError,
    FairAugError,
    GradientError,
    NumericError,
    ParameterError,
    TrainingError,
)
from .experiments import (
    run_benchmark,
    run_policy_grid,
    run_psi_sweep,
    run_transfer,
)
from .metrics import delta_ndcg, evaluate_rankings, ndcg_at_k
from .models import ModelConfig, model_scores, recommend_topn, train
from .policies import build_candidates, build_samples

__all__ = [
    "AugmentationConfig",
    "ConfigError",
    "ContractError",
    "DataError",
    "EmptyCandidatesError",
    "ExperimentConfig",
    "FairAugError",
    "GradientError",
    "InteractionSchema",
    "ModelConfig",
    "NumericError",
    "ParameterError",
    "PolicyCell",
    "TrainingError",
    "__version__",
    "apply_augmentation",
    "augment",
    "build_candidates",
    "build_samples",
    "config_hash",
    "delta_ndcg",
    "evaluate_rankings",
    "ingest",
    "load_config",
    "model_scores",
    "ndcg_at_k",
    "partition_users",
    "recommend_topn",
    "run_benchmark",
    "run_policy_grid",
    "run_psi_sweep",
    "run_transfer",
    "temporal_split",
    "train",
]
