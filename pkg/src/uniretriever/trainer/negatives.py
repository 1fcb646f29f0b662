"""ANN hard-negative mining with relevance-based filtering."""

from __future__ import annotations

import logging

import numpy as np

from ..core import Rng

log = logging.getLogger(__name__)

NEIGHBORHOOD = 200
SCORE_THRESHOLD = 0.5
MODES = ("none", "score_filter", "rank_filter")


class BruteForceIndex:
    """Exact inner-product top-k over a fixed embedding matrix (ties to lower id)."""

    def __init__(self, vectors: np.ndarray):
        self.vectors = np.asarray(vectors, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.vectors)

    def top(self, queries: np.ndarray, k: int, chunk: int = 1024) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        k = min(k, len(self.vectors))
        out = np.empty((len(queries), k), dtype=np.int64)
        for lo in range(0, len(queries), chunk):
            s = queries[lo : lo + chunk] @ self.vectors.T
            if k < s.shape[1]:
                part = np.argpartition(-s, k - 1, axis=1)[:, :k]
            else:
                part = np.broadcast_to(np.arange(s.shape[1]), s.shape).copy()
            ps = np.take_along_axis(s, part, axis=1)
            # sort by score descending, then id ascending
            order = np.lexsort((part, -ps), axis=1)
            out[lo : lo + chunk] = np.take_along_axis(part, order, axis=1)
        return out


def select_negatives(neighbors, relevance, mode: str, n: int, rng: Rng, exclude=(),
                     warn: bool = True) -> np.ndarray:
    """Pick up to ``n`` negatives from a retrieved neighborhood.

    Args:
        neighbors: retrieved ad ids, best first.
        relevance: teacher relevance of each neighbor.
        mode: ``none`` (uniform), ``score_filter`` (relevance below 0.5) or
            ``rank_filter`` (lower half of the neighborhood re-sorted by relevance).
        n: number of negatives, at most 4.
        rng: sampling stream.
        exclude: ids that must never be returned (the query's clicked ads).
        warn: log a warning when the score filter falls back.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mining mode {mode!r}")
    if not 0 <= n <= 4:
        raise ValueError(f"at most 4 hard negatives per query, got {n}")
    neighbors = np.asarray(neighbors, dtype=np.int64)
    relevance = np.asarray(relevance, dtype=np.float64)
    keep = ~np.isin(neighbors, np.asarray(list(exclude), dtype=np.int64))
    if mode == "score_filter":
        eligible = neighbors[keep & (relevance < SCORE_THRESHOLD)]
        if len(eligible) == 0:
            if warn:
                log.warning("score filter left no eligible negatives; falling back to rank filter")
            select_negatives.fallbacks += 1
            mode = "rank_filter"
    if mode == "rank_filter":
        order = np.argsort(-relevance, kind="stable")
        lower = order[len(order) // 2 :]
        eligible = neighbors[lower][keep[lower]]
    elif mode == "none":
        eligible = neighbors[keep]
    if len(eligible) == 0 or n == 0:
        return np.zeros(0, dtype=np.int64)
    return eligible[rng.choice(len(eligible), min(n, len(eligible)), replace=False)]


select_negatives.fallbacks = 0


def mine_hard_negatives(index: BruteForceIndex, teacher, query_vec, query_id: int, mode: str, n: int,
                        rng: Rng, exclude=()) -> np.ndarray:
    """Retrieve the Top-200 ads for one query and sample filtered hard negatives.

    ``teacher`` maps ``(query_ids, ad_ids)`` arrays to relevance in [0, 1].
    Returns ad ids.
    """
    if len(index) < NEIGHBORHOOD:
        raise ValueError(f"index holds {len(index)} ads; hard-negative mining needs {NEIGHBORHOOD}")
    neigh = index.top(query_vec, NEIGHBORHOOD)[0]
    rel = teacher(np.full(len(neigh), query_id), neigh)
    return select_negatives(neigh, rel, mode, n, rng, exclude)
