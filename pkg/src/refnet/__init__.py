"""Refiner fusion network: multimodal fusion with per-modality decoders, built on a small autodiff core."""
from .autodiff import Tensor, backward
from .config import ExperimentConfig
from .data import SyntheticSpec, generate, load_jsonl, save_jsonl
from .errors import (ConfigurationError, DegenerateVectorError, DimensionError, DivergenceError, DomainError,
                     RankDeficiencyError, RefNetError, SchemaError)
from .losses import LossConfig, ms_loss, refiner_loss, train_loss
from .metrics import EvalReport, auroc, cluster_separation, macro_f1, micro_f1
from .model import ModalFeatureBatch, ModelSpec, ReFNetModel
from .trainer import TrainConfig, TrainState, mask_labels, pretrain, train

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "ExperimentConfig", "SyntheticSpec", "generate", "load_jsonl", "save_jsonl",
    "ConfigurationError", "DegenerateVectorError", "DimensionError", "DivergenceError", "DomainError",
    "RankDeficiencyError", "RefNetError", "SchemaError", "LossConfig", "ms_loss", "refiner_loss", "train_loss",
    "EvalReport", "auroc", "cluster_separation", "macro_f1", "micro_f1", "ModalFeatureBatch", "ModelSpec",
    "ReFNetModel", "TrainConfig", "TrainState", "mask_labels", "pretrain", "train",
]
