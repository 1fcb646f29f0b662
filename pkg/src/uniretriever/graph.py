"""Vamana proximity graph: construction, beam search and alpha pruning.

Nodes are dense ranks ``0..N-1``. Traversal order is by inner product with
the query; pruning geometry uses Euclidean distance.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import kernels
from .core import Rng


@dataclass(frozen=True)
class BuildParams:
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    passes: int = 2

    def __post_init__(self):
        if self.R < 2 or self.L_build < self.R:
            raise ValueError(f"need L_build >= R >= 2, got R={self.R}, L_build={self.L_build}")
        if self.alpha < 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


@dataclass
class VamanaGraph:
    """Bounded-degree adjacency stored as an ``(N, R)`` array padded with -1."""

    adjacency: np.ndarray
    degree: np.ndarray
    entry_point: int

    @property
    def N(self) -> int:
        return self.adjacency.shape[0]

    @property
    def R(self) -> int:
        return self.adjacency.shape[1]

    def neighbors(self, node: int) -> np.ndarray:
        return self.adjacency[node, : self.degree[node]]

    @classmethod
    def from_lists(cls, lists: list[Iterable[int]], R: int, entry_point: int = 0) -> "VamanaGraph":
        adj = np.full((len(lists), R), -1, dtype=np.int64)
        deg = np.zeros(len(lists), dtype=np.int64)
        for i, nbrs in enumerate(lists):
            nbrs = list(nbrs)
            if len(nbrs) > R:
                raise ValueError(f"node {i} has {len(nbrs)} neighbors, R={R}")
            adj[i, : len(nbrs)] = nbrs
            deg[i] = len(nbrs)
        return cls(adj, deg, entry_point)

    def reachable(self) -> np.ndarray:
        """Boolean mask of nodes reachable from the entry point (BFS)."""
        seen = np.zeros(self.N, dtype=bool)
        seen[self.entry_point] = True
        todo = deque([self.entry_point])
        while todo:
            u = todo.popleft()
            for v in self.neighbors(u):
                if not seen[v]:
                    seen[v] = True
                    todo.append(v)
        return seen


def medoid(vectors: np.ndarray) -> int:
    """Node with the largest inner product with the mean vector (lowest id on ties)."""
    v = np.asarray(vectors, dtype=np.float64)
    return int(np.argmax(v @ v.mean(axis=0)))


def greedy_search(g: VamanaGraph, vectors, q, k: int, L: int, entry: int | None = None):
    """Best-first beam search over ``g``.

    Args:
        g: the graph.
        vectors: either an ``(N, d)`` array (scores are exact inner products
            with ``q``) or a callable mapping an id array to a score array.
        q: query vector; ignored by callable scorers.
        k: number of results.
        L: candidate queue size.
        entry: start node, defaults to ``g.entry_point``.

    Returns:
        ``(top, visited)``: top-k ``(id, score)`` pairs in descending score
        order and the set of expanded node ids.
    """
    if g.N == 0:
        raise ValueError("cannot search an empty graph")
    if not 1 <= k <= L:
        raise ValueError(f"need 1 <= k <= L, got k={k}, L={L}")
    L = min(L, g.N)
    entry = g.entry_point if entry is None else entry
    if not callable(vectors):
        ids, scores, visited = kernels.greedy_search_ip(g.adjacency, g.degree, vectors, q, entry, L)
        top = list(zip(ids[:k].tolist(), scores[:k].tolist()))
        return top, set(visited.tolist())
    score_fn: Callable = vectors
    queue = [(-float(score_fn(np.array([entry]))[0]), entry)]
    seen = {entry}
    visited = set()
    while True:
        node = next((n for _, n in queue if n not in visited), None)
        if node is None:
            break
        visited.add(node)
        fresh = [int(v) for v in g.neighbors(node) if int(v) not in seen]
        if not fresh:
            continue
        seen.update(fresh)
        for v, s in zip(fresh, score_fn(np.array(fresh))):
            key = (-float(s), v)
            pos = bisect.bisect_left(queue, key)
            if pos < L:
                queue.insert(pos, key)
                del queue[L:]
    return [(n, -s) for s, n in queue[:k]], visited


def robust_prune(p: int, candidates, alpha: float, R: int, dist: Callable[[int, int], float]) -> list[int]:
    """Alpha-RNG pruning with an arbitrary pairwise distance.

    Args:
        p: the node being pruned.
        candidates: iterable of ``(id, distance_to_p)`` pairs.
        alpha: pruning slack; larger keeps more long edges.
        R: maximum neighbors kept.
        dist: pairwise distance between two candidate ids.
    """
    pool = sorted(((float(d), int(c)) for c, d in candidates if int(c) != p))
    out: list[int] = []
    while pool and len(out) < R:
        _, star = pool.pop(0)
        out.append(star)
        pool = [(d, c) for d, c in pool if not alpha * dist(star, c) <= d]
    return out


def _init_random(N: int, R: int, rng: Rng):
    adj = np.full((N, R), -1, dtype=np.int64)
    deg = np.zeros(N, dtype=np.int64)
    k = min(R, N - 1)
    if k == 0:
        return adj, deg
    for i in range(N):
        pick = rng.choice(N - 1, k, replace=False)
        pick[pick >= i] += 1
        adj[i, :k] = pick
    deg[:] = k
    return adj, deg


def build(vectors, params: BuildParams | None = None, rng: Rng | None = None) -> VamanaGraph:
    """Construct a Vamana graph over ``vectors``.

    Starts from a random R-regular graph and refines it with ``params.passes``
    passes over a seeded random node order; the first passes prune with
    alpha=1 and the last with ``params.alpha``.
    """
    params = params or BuildParams()
    rng = rng or Rng(0)
    v = np.ascontiguousarray(vectors, dtype=np.float32)
    N = len(v)
    if N < 1:
        raise ValueError("cannot build a graph over zero vectors")
    entry = medoid(v)
    adj, deg = _init_random(N, params.R, rng)
    alphas = [1.0] * (params.passes - 1) + [params.alpha]
    L = min(params.L_build, N)
    for alpha in alphas:
        order = rng.permutation(N).astype(np.int64)
        kernels.build_pass(adj, deg, v, order, entry, L, alpha, params.R)
    g = VamanaGraph(adj, deg, entry)
    repair_connectivity(g, v)
    return g


def repair_connectivity(g: VamanaGraph, vectors: np.ndarray) -> int:
    """Link every node unreachable from the entry point back into the graph.

    For each unreachable node the closest (L2) reachable node with a free slot
    gains an edge to it; if every reachable node is full, the closest reachable
    node's farthest neighbor is replaced, provided that neighbor keeps another
    in-edge. Returns the number of edges added.
    """
    v = np.asarray(vectors, dtype=np.float64)
    added = 0
    reach = g.reachable()
    for _ in range(2 * g.N):
        if reach.all():
            break
        u = int(np.flatnonzero(~reach)[0])
        cand = np.flatnonzero(reach)
        d = np.linalg.norm(v[cand] - v[u], axis=1)
        order = cand[np.lexsort((cand, d))]
        free = order[g.degree[order] < g.R]
        if len(free):
            w = int(free[0])
            g.adjacency[w, g.degree[w]] = u
            g.degree[w] += 1
        else:
            indeg = np.bincount(g.adjacency[g.adjacency >= 0], minlength=g.N)
            for w in order:
                nb = g.neighbors(w)
                far = np.argsort(-np.linalg.norm(v[nb] - v[w], axis=1), kind="stable")
                j = next((j for j in far if indeg[nb[j]] > 1), None)
                if j is not None:
                    g.adjacency[w, j] = u
                    break
            else:
                raise RuntimeError("cannot repair graph connectivity")
        added += 1
        reach = g.reachable()
    if not reach.all():
        raise RuntimeError("graph connectivity repair did not converge")
    return added
