"""Desk-scale news recommender with title debiasing.

Multi-field attention encoders over category/title/abstract views, a
focal-loss click objective, and an optional cross-field contrastive term
that aligns the title and abstract views of each news item, all on a
small numpy-backed reverse-mode autodiff substrate.
"""

from .data import (
    ImpressionLog,
    NewsArticle,
    SyntheticConfig,
    TrainingSample,
    Vocabulary,
    generate_synthetic_corpus,
)
from .diffcore import AdamState, Tensor, adam_step, finite_difference_check, no_grad
from .encoders import ModelParams, encode_candidate_news, encode_user
from .evaluation import MetricsReport, evaluate, inspect_ranking, run_ablation
from .objectives import LossConfig
from .training import (
    TrainConfig,
    init_params,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ImpressionLog",
    "LossConfig",
    "MetricsReport",
    "ModelParams",
    "NewsArticle",
    "SyntheticConfig",
    "Tensor",
    "TrainConfig",
    "TrainingSample",
    "Vocabulary",
    "adam_step",
    "encode_candidate_news",
    "encode_user",
    "evaluate",
    "finite_difference_check",
    "generate_synthetic_corpus",
    "init_params",
    "inspect_ranking",
    "load_checkpoint",
    "no_grad",
    "run_ablation",
    "save_checkpoint",
    "train",
]
