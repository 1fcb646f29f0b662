"""Two-step ANN search: PQ-guided graph traversal, then exact re-scoring."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field

import numpy as np

from .core import DimensionError
from .quantizer import build_adc
from .store import DiskIndex


@dataclass(frozen=True)
class SearchParams:
    k: int = 10
    L_search: int = 64
    beam_width: int = 4

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.L_search < self.k:
            raise ValueError(f"L_search={self.L_search} must be >= k={self.k}")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class SearchStats:
    hops: int = 0
    sector_reads: int = 0
    pq_evals: int = 0
    exact_evals: int = 0
    psi_evals: int = 0


@dataclass
class SearchResult:
    items: list[tuple[int, float]]
    stats: SearchStats = field(default_factory=SearchStats)
    # full queue after verification, exact scores, descending (used by re-ranking)
    candidates: list[tuple[int, float]] = field(default_factory=list)
    # cached full-precision vectors of every visited item, keyed by item id
    cache: dict = field(default_factory=dict)


def coarse_search(index: DiskIndex, q: np.ndarray, p: SearchParams, stats: SearchStats):
    """Beam search ordered by ADC scores; returns the final queue and the vector cache.

    The queue is a list of ``(-approx_score, rank)``; the cache maps rank to
    ``(item_id, vector)`` for every record read.
    """
    t1, f = index.tier1, index.postings
    table = build_adc(t1.codebook, q)
    m_idx = np.arange(t1.codebook.M)
    L = min(p.L_search, f.N)
    start = f.entry_rank
    queue = [(-float(table[m_idx, t1.codes[start]].sum()), start)]
    stats.pq_evals += 1
    seen = {start}
    cache: dict[int, tuple[int, np.ndarray]] = {}
    before = f.sector_reads
    while True:
        batch = [r for _, r in queue if r not in cache][: p.beam_width]
        if not batch:
            break
        stats.hops += 1
        fresh: list[int] = []
        for r in batch:
            rec = f.read_record(r)
            cache[r] = (rec.id, rec.vector)
            if len(rec.neighbors):
                for nr in f.ranks_of(rec.neighbors).tolist():
                    if nr not in seen:
                        seen.add(nr)
                        fresh.append(nr)
        if not fresh:
            continue
        codes = t1.codes[fresh].astype(np.int64)
        scores = table[m_idx, codes].sum(axis=1)
        stats.pq_evals += len(fresh)
        for r, s in zip(fresh, scores.tolist()):
            key = (-s, r)
            pos = bisect.bisect_left(queue, key)
            if pos < L:
                queue.insert(pos, key)
                del queue[L:]
    stats.sector_reads += f.sector_reads - before
    return queue, cache


def search(index: DiskIndex, q, p: SearchParams | None = None, verify_query=None) -> SearchResult:
    """Coarse PQ-guided search followed by exact post-verification.

    Every queue member has been expanded when the coarse phase ends, so its
    full vector is already cached and verification performs no extra reads.

    Args:
        index: opened two-tier index.
        q: query vector used for routing (scored against the PQ codes).
        p: search parameters.
        verify_query: optional separate query vector for post-verification,
            used when tier-two vectors live in a different embedding space
            than the codes (defaults to ``q``).
    """
    p = p or SearchParams()
    q = np.asarray(q, dtype=np.float64)
    qv = q if verify_query is None else np.asarray(verify_query, dtype=np.float64)
    for vec in (q, qv):
        if vec.shape != (index.postings.d,):
            raise DimensionError(f"query dimension {vec.shape[-1]} does not match index d={index.postings.d}")
    if index.postings.N == 0:
        raise ValueError("empty index")
    stats = SearchStats()
    queue, cache = coarse_search(index, q, p, stats)
    ranks = [r for _, r in queue]
    vecs = np.stack([cache[r][1] for r in ranks]).astype(np.float64)
    exact = vecs @ qv
    stats.exact_evals += len(ranks)
    ids = [cache[r][0] for r in ranks]
    order = sorted(range(len(ranks)), key=lambda i: (-exact[i], ids[i]))
    cand = [(ids[i], float(exact[i])) for i in order]
    return SearchResult(
        items=cand[: p.k],
        stats=stats,
        candidates=cand,
        cache={item_id: vec for item_id, vec in cache.values()},
    )


def brute_force(corpus, q, k: int, ids=None) -> list[tuple[int, float]]:
    """Exact maximum-inner-product top-k; ties go to the lower id."""
    corpus = np.asarray(corpus, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if corpus.shape[-1] != q.shape[-1]:
        raise DimensionError(f"dimension mismatch: {corpus.shape[-1]} vs {q.shape[-1]}")
    scores = corpus @ q
    ids = np.arange(len(corpus)) if ids is None else np.asarray(ids)
    order = np.lexsort((ids, -scores))[:k]
    return [(int(ids[i]), float(scores[i])) for i in order]


def brute_force_batch(corpus: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Top-k ranks per query row (ties to lower rank); returns ``(nq, k)`` ints."""
    corpus = np.asarray(corpus, dtype=np.float64)
    out = np.empty((len(queries), min(k, len(corpus))), dtype=np.int64)
    for lo in range(0, len(queries), 512):
        s = np.asarray(queries[lo : lo + 512], dtype=np.float64) @ corpus.T
        kk = out.shape[1]
        part = np.argpartition(-s, kk - 1, axis=1)[:, :kk] if kk < s.shape[1] else np.tile(np.arange(s.shape[1]), (len(s), 1))
        for i in range(len(s)):
            cand = part[i]
            order = np.lexsort((cand, -s[i, cand]))
            out[lo + i] = cand[order]
    return out
