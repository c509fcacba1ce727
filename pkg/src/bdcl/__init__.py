"""Balanced dual-contrastive learning with prior-guided multimodal fusion."""

from .core import (BDCLError, EmbeddingBatch, FeatureDataset, Labeled, Modality,
                   PseudoLabeled, UNLABELED, derive_rng, seeded_rng)
from .losses import LossConfig, bdcl_loss, inter_loss, intra_loss, standard_infonce
from .model import ModelParams, freeze_for_stage2, init_params
from .trainer import TrainConfig, stage1_train, stage2_tune

__version__ = "0.1.0"

__all__ = [
    "BDCLError", "EmbeddingBatch", "FeatureDataset", "Labeled", "LossConfig", "Modality",
    "ModelParams", "PseudoLabeled", "TrainConfig", "UNLABELED", "bdcl_loss", "derive_rng",
    "freeze_for_stage2", "init_params", "inter_loss", "intra_loss", "seeded_rng",
    "stage1_train", "stage2_tune", "standard_infonce",
]
