import numpy as np
import pytest

from uniretriever import _kernels_py, kernels
from uniretriever.core import Rng
from uniretriever.graph import BuildParams, VamanaGraph, build, greedy_search, medoid, robust_prune
from uniretriever.search import brute_force_batch


def _line_dist(points):
    return lambda a, b: abs(points[a] - points[b])


def test_robust_prune_examples():
    pts = {0: 0.0, 1: 1.0, 2: 2.0, 4: 4.0}
    cands = [(c, pts[c]) for c in (1, 2, 4)]
    assert robust_prune(0, cands, 1.0, 2, _line_dist(pts)) == [1]
    assert robust_prune(0, cands, 2.0, 2, _line_dist(pts)) == [1, 4]
    assert robust_prune(0, [], 1.2, 4, _line_dist(pts)) == []


def test_robust_prune_large_alpha_keeps_closest():
    rng = Rng(0)
    x = rng.normal(size=(30, 3))
    dist = lambda a, b: float(np.linalg.norm(x[a] - x[b]))
    cands = [(c, dist(0, c)) for c in range(1, 30)]
    got = robust_prune(0, cands, 1e9, 5, dist)
    want = sorted(range(1, 30), key=lambda c: dist(0, c))[:5]
    assert got == want


def test_greedy_search_singleton():
    g = VamanaGraph.from_lists([[]], R=2)
    top, visited = greedy_search(g, np.ones((1, 3)), np.ones(3), 1, 1)
    assert top == [(0, 3.0)] and visited == {0}


def test_greedy_search_empty_graph_errors():
    g = VamanaGraph.from_lists([], R=2)
    with pytest.raises(ValueError):
        greedy_search(g, np.zeros((0, 2)), np.zeros(2), 1, 1)


def test_greedy_search_path_graph():
    g = VamanaGraph.from_lists([[1], [0, 2], [1, 3], [2]], R=2, entry_point=0)
    vecs = np.arange(4, dtype=np.float64)[:, None]
    top, visited = greedy_search(g, vecs, np.array([1.0]), 1, 4)
    assert top[0][0] == 3 and visited == {0, 1, 2, 3}
    top_cb, visited_cb = greedy_search(g, lambda ids: vecs[ids, 0], None, 1, 4)
    assert top_cb[0][0] == 3 and visited_cb == visited


def test_greedy_search_complete_graph_matches_brute_force():
    x = Rng(1).normal(size=(12, 5))
    g = VamanaGraph.from_lists([[j for j in range(12) if j != i] for i in range(12)], R=11)
    q = Rng(2).normal(size=5)
    top, _ = greedy_search(g, x, q, 5, 12)
    assert [i for i, _ in top] == brute_force_batch(x, q[None], 5)[0].tolist()


def test_medoid_tie_goes_to_lowest():
    assert medoid(np.array([[1.0, 0], [1.0, 0], [-1.0, 0]])) == 0


def test_build_two_nodes():
    g = build(np.array([[0.0, 1.0], [1.0, 0.0]]), BuildParams(R=2, L_build=2), Rng(0))
    assert g.neighbors(0).tolist() == [1] and g.neighbors(1).tolist() == [0]


def test_build_invariants_and_recall():
    rng = Rng(3)
    x = rng.random((200, 16))
    g = build(x, BuildParams(R=16, L_build=32), Rng(0))
    for i in range(g.N):
        nb = g.neighbors(i)
        assert len(nb) <= g.R and i not in nb and len(set(nb.tolist())) == len(nb)
        assert np.all((nb >= 0) & (nb < g.N))
    assert g.reachable().all()
    assert g.entry_point == medoid(x)
    q = rng.random((100, 16))
    truth = brute_force_batch(x, q, 10)
    rec = np.mean([
        len({i for i, _ in greedy_search(g, x, q[j], 10, 32)[0]} & set(truth[j].tolist())) / 10
        for j in range(100)
    ])
    assert rec >= 0.95


def test_build_deterministic():
    x = Rng(4).normal(size=(150, 8))
    a = build(x, BuildParams(R=8, L_build=16), Rng(5))
    b = build(x, BuildParams(R=8, L_build=16), Rng(5))
    np.testing.assert_array_equal(a.adjacency, b.adjacency)


def test_build_params_validation():
    with pytest.raises(ValueError):
        BuildParams(R=8, L_build=4)
    with pytest.raises(ValueError):
        BuildParams(alpha=0.5)


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
def test_compiled_and_fallback_kernels_agree():
    # integer-valued vectors keep every float operation exact on both backends
    rng = Rng(6)
    x = rng.integers(-8, 9, (120, 6)).astype(np.float32)
    results = []
    for impl in (kernels.impl, _kernels_py):
        r = Rng(7)
        adj = np.full((120, 8), -1, dtype=np.int64)
        deg = np.zeros(120, dtype=np.int64)
        for i in range(120):
            pick = r.choice(119, 8, replace=False)
            pick[pick >= i] += 1
            adj[i] = pick
        deg[:] = 8
        entry = medoid(x)
        impl.build_pass(adj, deg, x, r.permutation(120).astype(np.int64), entry, 16, 1.2, 8)
        ids, scores, visited = impl.greedy_search_ip(adj, deg, x, x[3].astype(np.float64), entry, 16)
        pruned = impl.robust_prune(0, np.arange(1, 120), x, 1.2, 8)
        results.append((adj.copy(), deg.copy(), ids, scores, visited, pruned))
    for a, b in zip(*results):
        np.testing.assert_array_equal(a, b)
