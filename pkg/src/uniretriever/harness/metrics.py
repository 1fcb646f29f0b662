"""Retrieval and re-ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricReport:
    hit_at: dict = field(default_factory=dict)
    rel_at: dict = field(default_factory=dict)
    recall_at: dict = field(default_factory=dict)
    ndcg: float = 0.0
    mrr: float = 0.0


def hit_at_k(retrieved, clicked: int, K: int) -> int:
    """1 if ``clicked`` is among the first ``K`` retrieved ids."""
    return int(clicked in list(retrieved)[:K])


def rel_at_k(retrieved, relevance, K: int) -> float:
    """Mean relevance of the first ``K`` items.

    Args:
        retrieved: ranked ids.
        relevance: callable mapping an id array to relevance, or an array of
            relevance values aligned with ``retrieved``.
        K: cutoff.
    """
    top = np.asarray(list(retrieved)[:K])
    if len(top) == 0:
        raise ValueError("rel@K of an empty list is undefined")
    vals = relevance(top) if callable(relevance) else np.asarray(relevance, dtype=np.float64)[: len(top)]
    return float(np.mean(vals))


def recall_at_k(retrieved, truth, K: int) -> float:
    """Fraction of ``truth`` found in the first ``K`` retrieved ids."""
    truth = set(truth)
    if not truth:
        raise ValueError("empty ground truth")
    return len(truth & set(list(retrieved)[:K])) / len(truth)


def ndcg_at_k(retrieved, gains: dict, K: int) -> float:
    """NDCG with graded gains and a ``1/log2(rank+1)`` discount.

    Args:
        retrieved: ranked ids.
        gains: ``{id: gain}`` over the ground-truth items; others gain 0.
        K: cutoff.
    """
    if not gains:
        raise ValueError("empty ground truth")
    disc = 1.0 / np.log2(np.arange(2, K + 2))
    got = np.array([gains.get(i, 0.0) for i in list(retrieved)[:K]])
    ideal = np.sort(np.fromiter(gains.values(), dtype=np.float64))[::-1][:K]
    idcg = float(ideal @ disc[: len(ideal)])
    if idcg <= 0:
        raise ValueError("ideal DCG is zero")
    return float(got @ disc[: len(got)]) / idcg


def mrr(retrieved, relevant, K: int | None = None) -> float:
    """Reciprocal rank of the first member of ``relevant`` (0 if absent)."""
    relevant = set(relevant)
    if not relevant:
        raise ValueError("empty ground truth")
    items = list(retrieved) if K is None else list(retrieved)[:K]
    for r, i in enumerate(items, 1):
        if i in relevant:
            return 1.0 / r
    return 0.0
