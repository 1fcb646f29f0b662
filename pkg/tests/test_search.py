import numpy as np
import pytest

from uniretriever.core import DimensionError, Rng
from uniretriever.graph import BuildParams, VamanaGraph, build
from uniretriever.quantizer import encode, train_pq
from uniretriever.search import SearchParams, brute_force, brute_force_batch, search
from uniretriever.store import DiskIndex, TierOne, write_index


def _index(tmp_path, x, graph, M=2, P=4):
    cb = train_pq(x, M=M, P=P, iters=5, rng=Rng(0))
    write_index(x, graph, TierOne(cb, encode(cb, x)), tmp_path)
    return DiskIndex.open(tmp_path)


def test_brute_force_examples():
    c = np.eye(3)
    assert brute_force(c, [0, 5, 0], 1)[0][0] == 1
    assert [i for i, _ in brute_force(np.ones((5, 2)), [1, 1], 3)] == [0, 1, 2]
    np.testing.assert_array_equal(brute_force_batch(np.ones((5, 2)), np.ones((1, 2)), 3), [[0, 1, 2]])


def test_search_singleton(tmp_path):
    x = np.array([[1.0, 2.0]], dtype=np.float32)
    idx = _index(tmp_path, x, VamanaGraph.from_lists([[]], 2), M=1, P=1)
    res = search(idx, np.array([3.0, 1.0]), SearchParams(k=5, L_search=5))
    assert res.items == [(0, 5.0)]


def test_search_complete_graph_equals_brute_force(tmp_path):
    x = Rng(0).normal(size=(20, 4)).astype(np.float32)
    g = VamanaGraph.from_lists([[j for j in range(20) if j != i] for i in range(20)], 19)
    idx = _index(tmp_path, x, g)
    for s in range(5):
        q = Rng(s + 10).normal(size=4)
        res = search(idx, q, SearchParams(k=5, L_search=20))
        assert [i for i, _ in res.items] == [i for i, _ in brute_force(x, q, 5)]


def test_search_properties(tmp_path):
    rng = Rng(1)
    x = rng.normal(size=(500, 16)).astype(np.float32)
    idx = _index(tmp_path, x, build(x, BuildParams(R=16, L_build=32), Rng(0)), M=4, P=16)
    q = rng.normal(size=16)
    p = SearchParams(k=10, L_search=32)
    a, b = search(idx, q, p), search(idx, q, p)
    assert a.items == b.items and a.stats == b.stats
    # verification scores are exact inner products and sorted
    for i, s in a.items:
        assert s == pytest.approx(float(x[i].astype(np.float64) @ q), abs=1e-9)
    assert [s for _, s in a.items] == sorted((s for _, s in a.items), reverse=True)
    # every candidate's vector came from a record read during traversal: reads = visited records
    assert a.stats.sector_reads == len(a.cache)
    assert a.stats.exact_evals == len(a.candidates)


def test_search_dimension_and_k(tmp_path):
    x = Rng(2).normal(size=(8, 4)).astype(np.float32)
    g = VamanaGraph.from_lists([[j for j in range(8) if j != i] for i in range(8)], 7)
    idx = _index(tmp_path, x, g)
    with pytest.raises(DimensionError):
        search(idx, np.ones(3))
    res = search(idx, np.ones(4), SearchParams(k=20, L_search=20))
    assert len(res.items) == 8


def test_verify_query_rescoring(tmp_path):
    x = Rng(3).normal(size=(10, 4)).astype(np.float32)
    g = VamanaGraph.from_lists([[j for j in range(10) if j != i] for i in range(10)], 9)
    idx = _index(tmp_path, x, g)
    qv = np.array([0.0, 0.0, 0.0, 1.0])
    res = search(idx, np.ones(4), SearchParams(k=3, L_search=10), verify_query=qv)
    assert [i for i, _ in res.items] == [i for i, _ in brute_force(x, qv, 3)]
