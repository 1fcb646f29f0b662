"""Synthetic world, evaluation metrics and experiment drivers."""

from .metrics import MetricReport, hit_at_k, mrr, ndcg_at_k, recall_at_k, rel_at_k
from .world import SyntheticWorld, Teacher, WorldConfig, gaussian_mixture, generate, load_world, save_world

__all__ = [
    "MetricReport", "hit_at_k", "mrr", "ndcg_at_k", "recall_at_k", "rel_at_k",
    "SyntheticWorld", "Teacher", "WorldConfig", "gaussian_mixture", "generate", "load_world", "save_world",
]
