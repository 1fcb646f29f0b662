import numpy as np
import pytest

from uniretriever.core import Rng
from uniretriever.graph import VamanaGraph
from uniretriever.quantizer import encode, train_pq
from uniretriever.rerank import (
    AdaptConfig,
    TableRankSource,
    adapt_to_rank,
    bi_stage,
    minmax,
    psi,
    rank_loss,
    sample_candidates,
    spearman,
    tri_stage,
)
from uniretriever.search import SearchParams, search
from uniretriever.store import DiskIndex, TierOne, write_index
from uniretriever.trainer.encoder import Encoder

from helpers import WORDS, fd_check, small_encoder, text


def test_psi_examples():
    assert psi(0.1, 0.8, np.e - 1) == pytest.approx(0.08)
    assert psi(0.0, 0.7, 3.0) == 0.0
    with pytest.raises(ValueError):
        psi(1.2, 0.5, 1.0)
    with pytest.raises(ValueError):
        psi(0.5, 0.5, 0.0)


def test_psi_monotone_in_each_argument():
    rng = Rng(0)
    for _ in range(200):
        c, r = rng.uniform(0.01, 0.9, 2)
        b = rng.uniform(0.1, 5)
        base = psi(c, r, b)
        assert psi(c + 0.05, r, b) > base
        assert psi(c, r + 0.05, b) > base
        assert psi(c, r, b + 0.5) > base


def test_minmax_and_sampling():
    np.testing.assert_allclose(minmax(np.array([2.0, 4.0, 3.0])), [0, 1, 0.5])
    assert not minmax(np.ones(3)).any()
    s = sample_candidates(np.arange(200), 50, 50, Rng(0))
    assert s[:50].tolist() == list(range(50)) and len(s) == 100 and s[50:].min() >= 50
    assert len(sample_candidates(np.arange(60), 50, 50, Rng(0))) == 60


def test_table_rank_source_missing_pair():
    src = TableRankSource({(0, 1): (0.5, 0.5, 1.0)})
    with pytest.raises(KeyError):
        src(0, [1, 2])


@pytest.mark.parametrize("seed", range(4))
def test_rank_loss_gradient_matches_finite_differences(seed):
    rng = Rng(seed)
    enc = small_encoder(seed)
    qs = [text(rng) for _ in range(2)]
    ads = [[text(rng) for _ in range(3)] for _ in qs]
    tg = [rng.random(3) for _ in qs]
    trainable = ("W_rank", "W1", "b1", "W2", "b2")
    _, g = rank_loss(enc, qs, ads, tg, trainable)
    assert fd_check(enc, lambda: rank_loss(enc, qs, ads, tg, trainable)[0], g, rng) < 1e-4


def _world(n_ads=80, n_q=30, seed=0):
    rng = Rng(seed)
    ad_text = [text(rng, 2, 4) for _ in range(n_ads)]
    table = {}
    for q in range(n_q):
        for a in range(n_ads):
            table[(q, a)] = (float(rng.uniform(0.05, 0.9)), float(rng.uniform(0.05, 0.9)), float(rng.uniform(0.5, 4)))
    return ad_text, [(q, text(rng, 1, 3)) for q in range(n_q)], TableRankSource(table)


def test_adapt_zero_lr_keeps_rank_head():
    ad_text, queries, src = _world()
    enc = small_encoder()
    first = [np.arange(len(ad_text))] * len(queries)
    out = adapt_to_rank(enc, first, queries, ad_text, src, AdaptConfig(lr=0.0, epochs=2))
    np.testing.assert_array_equal(out.params["W_rank"], enc.params["W_rank"])


def test_adapt_skips_short_candidate_lists(caplog):
    ad_text, queries, src = _world()
    first = [np.array([0])] + [np.arange(10)] * (len(queries) - 1)
    adapt_to_rank(small_encoder(), first, queries, ad_text, src, AdaptConfig(epochs=1))
    assert "skipped" in caplog.text


def test_adapt_increases_spearman_correlation():
    # rank targets follow a planted linear score over word features
    rng = Rng(4)
    weights = {w: rng.normal() for w in WORDS}
    ad_text = [text(rng, 1, 3) for _ in range(120)]
    raw = np.array([sum(weights[t] for t in a.split()) for a in ad_text])
    rel = 0.05 + 0.9 * minmax(raw)
    table = {(q, a): (0.5, float(rel[a]), 1.0) for q in range(20) for a in range(120)}
    src = TableRankSource(table)
    queries = [(q, text(rng, 1, 2)) for q in range(20)]
    first = [np.arange(120)] * 20
    enc = Encoder(F=64, h=16, d_raw=8, d=8, rng=Rng(0), scale=0.5)
    cfg = AdaptConfig(lr=0.05, epochs=40, head=30, tail=30)
    out = adapt_to_rank(enc, first, queries, ad_text, src, cfg)
    held = np.arange(60, 120)

    def mean_rho(e):
        A = e.rank_embeddings([ad_text[a] for a in held])
        return np.mean([spearman(A @ e.embed_rank(qt), rel[held]) for _, qt in queries])

    assert mean_rho(out) > mean_rho(enc)


def _index(tmp_path, vecs, tier2=None):
    N = len(vecs)
    g = VamanaGraph.from_lists([[j for j in range(N) if j != i] for i in range(N)], N - 1)
    cb = train_pq(vecs, M=2, P=4, iters=3, rng=Rng(0))
    write_index(vecs if tier2 is None else tier2, g, TierOne(cb, encode(cb, vecs)), tmp_path)
    return DiskIndex.open(tmp_path)


def test_tri_stage_constant_psi_keeps_verification_order(tmp_path):
    vecs = Rng(0).normal(size=(20, 4)).astype(np.float32)
    idx = _index(tmp_path, vecs)
    src = TableRankSource({(0, a): (0.5, 0.5, 1.0) for a in range(20)})
    p = SearchParams(k=5, L_search=20)
    ranked, base = tri_stage(idx, np.ones(4), 0, p, src, return_base=True)
    assert [i for i, _ in ranked.items] == [i for i, _ in base.items]
    assert ranked.stats.psi_evals == 20


def test_tri_stage_orders_by_psi(tmp_path):
    vecs = Rng(1).normal(size=(10, 4)).astype(np.float32)
    idx = _index(tmp_path, vecs)
    src = TableRankSource({(0, a): (0.1 + 0.05 * a, 0.5, 1.0) for a in range(10)})
    ranked = tri_stage(idx, np.ones(4), 0, SearchParams(k=3, L_search=10), src)
    assert [i for i, _ in ranked.items] == [9, 8, 7]


def test_bi_stage_identity_and_no_psi(tmp_path):
    vecs = Rng(2).normal(size=(16, 4)).astype(np.float32)
    idx = _index(tmp_path, vecs)
    q = Rng(3).normal(size=4)
    p = SearchParams(k=5, L_search=16)
    out = bi_stage(idx, q, q, p)
    assert out.items == search(idx, q, p).items
    assert out.stats.psi_evals == 0


def test_spearman():
    assert spearman([1, 2, 3], [10, 20, 30]) == pytest.approx(1.0)
    assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
    assert spearman([1, 2, 3], [5, 5, 5]) == 0.0


def test_adapt_stays_finite_on_large_scale_heads():
    # a large-norm rank head makes the bilinear loss huge; calibration keeps SGD stable
    ad_text, queries, src = _world()
    enc = small_encoder()
    enc.params["W_rank"] *= 50.0
    first = [np.arange(len(ad_text))] * len(queries)
    hist = []
    out = adapt_to_rank(enc, first, queries, ad_text, src, AdaptConfig(epochs=3), hist)
    assert np.all(np.isfinite(out.params["W_rank"]))
    assert hist[0] < 10.0
