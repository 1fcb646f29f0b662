"""Pure-Python/numpy fallback for the graph kernels.

Mirrors ``_kernels.pyx`` operation for operation so that both produce the
same graph on inputs whose arithmetic is exact (e.g. integer-valued vectors).
Adjacency is a dense ``(N, R)`` int64 array padded with -1 plus a degree array.
"""

from __future__ import annotations

import bisect

import numpy as np


def _insert(queue, score, node, L):
    # queue holds (-score, id) so that ascending order = descending score, lower id first
    key = (-score, node)
    pos = bisect.bisect_left(queue, key)
    if pos >= L:
        return
    queue.insert(pos, key)
    if len(queue) > L:
        queue.pop()


def greedy_search_ip(adj, deg, vectors, query, entry, L):
    """Beam search maximizing inner product with ``query``.

    Returns ``(ids, scores, visited)`` where ids/scores are the final queue in
    descending score order and visited lists expanded nodes in expansion order.
    """
    q = np.asarray(query, dtype=np.float64)
    seen = {int(entry)}
    queue = [(-float(np.dot(vectors[entry].astype(np.float64), q)), int(entry))]
    expanded = set()
    visited = []
    while True:
        node = None
        for _, cand in queue:
            if cand not in expanded:
                node = cand
                break
        if node is None:
            break
        expanded.add(node)
        visited.append(node)
        nbrs = [int(j) for j in adj[node, : deg[node]] if int(j) not in seen]
        if not nbrs:
            continue
        seen.update(nbrs)
        scores = vectors[nbrs].astype(np.float64) @ q
        for j, s in zip(nbrs, scores):
            _insert(queue, float(s), j, L)
    ids = np.array([n for _, n in queue], dtype=np.int64)
    scores = np.array([-s for s, _ in queue], dtype=np.float64)
    return ids, scores, np.array(visited, dtype=np.int64)


def _l2(vectors, p, cands):
    diff = vectors[cands].astype(np.float64) - vectors[p].astype(np.float64)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def robust_prune(p, cands, vectors, alpha, R):
    """Alpha-RNG pruning of candidate ids around node ``p`` using L2 distance."""
    cands = [int(c) for c in dict.fromkeys(int(c) for c in cands) if int(c) != p]
    if not cands:
        return np.empty(0, dtype=np.int64)
    dist = _l2(vectors, p, cands)
    order = sorted(range(len(cands)), key=lambda i: (dist[i], cands[i]))
    pool = [(float(dist[i]), cands[i]) for i in order]
    out = []
    while pool and len(out) < R:
        _, star = pool.pop(0)
        out.append(star)
        if not pool:
            break
        rest = [c for _, c in pool]
        d_star = _l2(vectors, star, rest)
        pool = [item for item, ds in zip(pool, d_star) if not alpha * ds <= item[0]]
    return np.array(out, dtype=np.int64)


def build_pass(adj, deg, vectors, order, entry, L, alpha, R):
    """One Vamana refinement pass, updating ``adj``/``deg`` in place."""
    for p in order:
        p = int(p)
        _, _, visited = greedy_search_ip(adj, deg, vectors, vectors[p], entry, L)
        cands = list(visited) + list(adj[p, : deg[p]])
        new = robust_prune(p, cands, vectors, alpha, R)
        adj[p, :] = -1
        adj[p, : len(new)] = new
        deg[p] = len(new)
        for j in new:
            j = int(j)
            if p in adj[j, : deg[j]]:
                continue
            if deg[j] < R:
                adj[j, deg[j]] = p
                deg[j] += 1
            else:
                pruned = robust_prune(j, list(adj[j, : deg[j]]) + [p], vectors, alpha, R)
                adj[j, :] = -1
                adj[j, : len(pruned)] = pruned
                deg[j] = len(pruned)
