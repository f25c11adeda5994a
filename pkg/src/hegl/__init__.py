"""Explanation-guided multi-label classification with a small vision transformer.

A numpy reverse-mode tensor core drives a ViT encoder with a cross-attention
decoder over frozen class queries. Training combines binary cross-entropy, a
penalised Dice alignment term and a discriminative attention term.
"""

import logging as _logging

from .data import Dataset, DatasetSpec, NoiseSpec, generate_synthetic, load_manifest, split
from .estimator import HEGLClassifier
from .losses import LossBreakdown, LossWeights, PenalizedDiceParams, hegl_loss
from .metrics import MetricReport, auc, evaluate, noise_sweep
from .model import HEGLNet, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .trainer import DEFAULT_VARIANTS, TrainConfig, run_matrix, train

__all__ = [
    "DEFAULT_VARIANTS",
    "Dataset",
    "DatasetSpec",
    "HEGLClassifier",
    "HEGLNet",
    "LossBreakdown",
    "LossWeights",
    "MetricReport",
    "ModelConfig",
    "NoiseSpec",
    "PenalizedDiceParams",
    "TrainConfig",
    "auc",
    "build_model",
    "evaluate",
    "generate_synthetic",
    "hegl_loss",
    "load_checkpoint",
    "load_manifest",
    "noise_sweep",
    "run_matrix",
    "save_checkpoint",
    "split",
    "train",
]

_logging.getLogger(__name__).addHandler(_logging.NullHandler())
