"""Multi-view classification with all-subsets fusion, uncertainty-weighted
score fusion, and hierarchical mutual distillation."""

from .combinator import CombinationSet, enumerate_combinations, fuse_tokens, predict_all
from .data import MultiViewDataset, SyntheticSpec, generate_synthetic, synthesize
from .distill import (
    DistillTopology,
    LossBreakdown,
    ScheduleParams,
    adaptive_params,
    hmd_loss,
    kd_loss,
    total_loss,
)
from .encoder import Encoder, EncoderConfig, load_checkpoint, save_checkpoint
from .tensorkit import Tape, Tensor, grad_check
from .trainkit import MetricsRow, TrainConfig, evaluate, run_ablation, sgdr_lr, train
from .uncertainty import (
    AggregatedPrediction,
    UncertaintyScore,
    element_weights,
    uncertainty,
    weighted_fuse,
)

__version__ = "0.1.0"

__all__ = [
    "AggregatedPrediction",
    "CombinationSet",
    "DistillTopology",
    "Encoder",
    "EncoderConfig",
    "LossBreakdown",
    "MetricsRow",
    "MultiViewDataset",
    "ScheduleParams",
    "SyntheticSpec",
    "Tape",
    "Tensor",
    "TrainConfig",
    "UncertaintyScore",
    "adaptive_params",
    "element_weights",
    "enumerate_combinations",
    "evaluate",
    "fuse_tokens",
    "generate_synthetic",
    "grad_check",
    "hmd_loss",
    "kd_loss",
    "load_checkpoint",
    "predict_all",
    "run_ablation",
    "save_checkpoint",
    "sgdr_lr",
    "synthesize",
    "total_loss",
    "train",
    "uncertainty",
    "weighted_fuse",
]
