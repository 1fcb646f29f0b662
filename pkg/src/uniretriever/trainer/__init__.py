"""Multi-objective representation learning."""

from .encoder import SGD, Encoder, featurize
from .losses import (
    LossConfig,
    Triplet,
    contrastive_terms,
    distill_loss,
    distill_terms,
    infonce_loss,
    monolithic_step,
    sharded_contrastive_step,
)
from .negatives import BruteForceIndex, mine_hard_negatives, select_negatives
from .train import ClickDataset, TrainConfig, TrainLog, train

__all__ = [
    "Encoder", "SGD", "featurize", "LossConfig", "Triplet", "contrastive_terms",
    "distill_loss", "distill_terms", "infonce_loss", "monolithic_step", "sharded_contrastive_step",
    "BruteForceIndex", "mine_hard_negatives", "select_negatives",
    "ClickDataset", "TrainConfig", "TrainLog", "train",
]
