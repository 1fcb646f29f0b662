import numpy as np
import pytest

from uniretriever.core import DimensionError, Rng
from uniretriever.quantizer import (
    Codebook,
    FormatError,
    MoPQConfig,
    approx_ip,
    build_adc,
    encode,
    mopq_loss,
    read_codebook,
    read_codes,
    reconstruct,
    train_mopq,
    train_pq,
    write_codebook,
    write_codes,
)


def test_train_pq_exact_clustering():
    rng = Rng(0)
    values = rng.normal(size=(2, 4, 2))  # M=2, P=4, d_sub=2
    picks = rng.integers(0, 4, (64, 2))
    picks[:4] = np.arange(4)[:, None]
    corpus = np.concatenate([values[0][picks[:, 0]], values[1][picks[:, 1]]], axis=1)
    hist = []
    cb = train_pq(corpus, M=2, P=4, iters=10, rng=Rng(1), history=hist)
    for m in range(2):
        got = np.sort(cb.words[m].astype(np.float64), axis=0)
        np.testing.assert_allclose(got, np.sort(values[m], axis=0), atol=1e-6)
    err = np.sum((reconstruct(cb, encode(cb, corpus)) - corpus) ** 2, axis=1)
    assert err.max() < 1e-10


def test_train_pq_single_codeword_is_mean():
    x = Rng(3).normal(size=(50, 6))
    cb = train_pq(x, M=3, P=1, iters=5, rng=Rng(0))
    np.testing.assert_allclose(cb.words[:, 0, :].reshape(-1), x.mean(axis=0), atol=1e-6)


def test_train_pq_beats_random_codebooks():
    x = Rng(5).normal(size=(256, 8))
    cb = train_pq(x, M=2, P=4, iters=20, rng=Rng(0))

    def mse(c):
        return np.mean(np.sum((reconstruct(c, encode(c, x)) - x) ** 2, axis=1))

    ours = mse(cb)
    r = Rng(9)
    for _ in range(100):
        rand = Codebook(r.normal(size=(2, 4, 4)))
        assert ours <= mse(rand)


def test_train_pq_objective_non_increasing():
    hist = []
    train_pq(Rng(2).normal(size=(400, 16)), M=4, P=16, iters=15, rng=Rng(0), history=hist)
    for h in hist:
        assert all(b <= a + 1e-9 for a, b in zip(h, h[1:]))


def test_train_pq_errors():
    with pytest.raises(ValueError):
        train_pq(np.zeros((3, 4)), M=2, P=4)
    with pytest.raises(DimensionError):
        train_pq(Rng(0).normal(size=(20, 5)), M=2, P=4)
    with pytest.raises(ValueError):
        train_pq(Rng(0).normal(size=(300, 4)), M=2, P=257)


def _cb(*subs):
    return Codebook(np.array(subs, dtype=np.float32))


def test_encode_examples():
    cb = _cb([[0, 0], [1, 1]])
    assert encode(cb, [0.9, 0.9]).tolist() == [1]
    assert encode(cb, [0.0, 0.0]).tolist() == [0]
    tie = _cb([[0, 0], [5, 5], [2, 0]])
    assert encode(tie, [1.0, 0.0]).tolist() == [0]
    with pytest.raises(DimensionError):
        encode(cb, [1.0, 2.0, 3.0])


def test_encode_matches_brute_force_argmin():
    rng = Rng(11)
    cb = Codebook(rng.normal(size=(4, 16, 3)))
    x = rng.normal(size=(200, 12))
    codes = encode(cb, x)
    for m in range(4):
        seg = x[:, 3 * m : 3 * m + 3]
        d = ((seg[:, None, :] - cb.words[m].astype(np.float64)[None]) ** 2).sum(-1)
        np.testing.assert_array_equal(codes[:, m], d.argmin(axis=1))


def test_reconstruct_examples():
    cb = _cb([[1, 0], [0, 1]], [[1, 0], [0, 1]])
    np.testing.assert_array_equal(reconstruct(cb, [0, 1]), [1, 0, 0, 1])
    v = reconstruct(cb, [1, 0])
    np.testing.assert_array_equal(reconstruct(cb, encode(cb, v)), v)
    with pytest.raises(ValueError):
        reconstruct(cb, [0, 2])


def test_build_adc_example():
    cb = _cb([[1, 0], [0, 1]], [[1, 1], [0, 0]])
    q = np.array([1.0, 2.0, 3.0, 4.0])
    table = build_adc(cb, q)
    np.testing.assert_array_equal(table, [[1, 2], [7, 0]])
    assert approx_ip(table, [0, 0]) == 8 == q @ reconstruct(cb, [0, 0])
    assert not build_adc(cb, np.zeros(4)).any()
    assert approx_ip(np.zeros((2, 2)), [1, 1]) == 0


def test_adc_single_codebook():
    rng = Rng(1)
    cb = Codebook(rng.normal(size=(1, 8, 6)))
    q = rng.normal(size=6)
    for j in range(8):
        assert approx_ip(build_adc(cb, q), [j]) == pytest.approx(q @ reconstruct(cb, [j]), abs=1e-6)


def test_adc_random_pairs():
    rng = Rng(4)
    cb = Codebook(rng.normal(size=(8, 256, 8)))
    q = rng.normal(size=(20, 64))
    codes = rng.integers(0, 256, (20, 50, 8))
    for i in range(20):
        got = approx_ip(build_adc(cb, q[i]), codes[i])
        want = reconstruct(cb, codes[i]) @ q[i]
        np.testing.assert_allclose(got, want, atol=1e-6 * (1 + np.abs(want).max()))


# --- MoPQ -----------------------------------------------------------------------------


def test_mopq_codebook_gradient_finite_differences():
    rng = Rng(8)
    q, a = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    words = rng.normal(size=(2, 3, 2))
    _, gw, *_ = mopq_loss(q, a, words, 0.5)
    codes = np.stack([encode(Codebook(words), a)[:, m] for m in range(2)], axis=1).astype(np.int64)
    h = 1e-5
    for idx in np.ndindex(words.shape):
        wp, wm = words.copy(), words.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (mopq_loss(q, a, wp, 0.5, codes=codes)[0] - mopq_loss(q, a, wm, 0.5, codes=codes)[0]) / (2 * h)
        assert gw[idx] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_mopq_single_codeword_gradient_sums_ad_gradients():
    rng = Rng(2)
    q, a = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    words = rng.normal(size=(2, 1, 2))
    _, gw, _, ga, _ = mopq_loss(q, a, words, 0.3)
    np.testing.assert_allclose(gw[:, 0, :].reshape(-1), ga.sum(axis=0), atol=1e-12)


class _TableEncoder:
    def __init__(self, table):
        self.table = table

    def serving_embeddings(self, texts):
        return np.stack([self.table[t] for t in texts])


def _two_cluster_world(n=120, seed=0):
    rng = Rng(seed)
    centers = np.array([[3.0] * 4 + [0.0] * 4, [0.0] * 4 + [3.0] * 4])
    lab = rng.integers(0, 2, n)
    ads = centers[lab] + rng.normal(size=(n, 8))
    queries = ads + 0.3 * rng.normal(size=(n, 8))
    table = {f"a{i}": ads[i] for i in range(n)}
    table.update({f"q{i}": queries[i] for i in range(n)})
    pairs = [(f"q{i}", f"a{i}") for i in range(n)]
    return ads, queries, pairs, _TableEncoder(table)


def test_train_mopq_zero_lr_is_noop():
    ads, _, pairs, enc = _two_cluster_world()
    c0 = train_pq(ads, M=2, P=4, iters=5, rng=Rng(0))
    out = train_mopq(pairs, enc, c0, MoPQConfig(lr=0.0, steps=5, batch_size=32))
    np.testing.assert_array_equal(out.words, c0.words)


def test_train_mopq_loss_decreases_on_fixed_batch():
    ads, _, pairs, enc = _two_cluster_world()
    c0 = train_pq(ads, M=2, P=4, iters=5, rng=Rng(0))
    cfg = MoPQConfig(lr=0.01, steps=10, batch_size=len(pairs), momentum=0.0, temperature=1.0,
                     corpus_negatives=0)
    train_mopq(pairs, enc, c0, cfg)
    h = cfg.history
    assert h[-1] <= h[0]


def test_mopq_recall_at_one_not_worse_than_pq():
    ads, queries, pairs, enc = _two_cluster_world(n=200, seed=3)
    c0 = train_pq(ads, M=2, P=4, iters=10, rng=Rng(0))
    cb = train_mopq(pairs, enc, c0, MoPQConfig(lr=0.02, steps=200, batch_size=64, temperature=1.0))

    def recall1(c):
        codes = encode(c, ads)
        hits = 0
        for i, q in enumerate(queries):
            s = approx_ip(build_adc(c, q), codes)
            hits += int(np.argmax(s) == i)
        return hits / len(queries)

    assert recall1(cb) >= recall1(c0)


# --- file formats ---------------------------------------------------------------------


def test_codebook_and_codes_round_trip(tmp_path):
    cb = train_pq(Rng(0).normal(size=(300, 16)), M=4, P=8, iters=3, rng=Rng(0))
    write_codebook(cb, tmp_path / "c.cb")
    back = read_codebook(tmp_path / "c.cb")
    assert back.words.tobytes() == cb.words.tobytes()
    codes = Rng(1).integers(0, 8, (10, 4)).astype(np.uint8)
    write_codes(codes, tmp_path / "c.pqc")
    np.testing.assert_array_equal(read_codes(tmp_path / "c.pqc"), codes)


def test_truncated_and_corrupt_files(tmp_path):
    codes = np.zeros((10, 8), dtype=np.uint8)
    write_codes(codes, tmp_path / "c.pqc")
    data = (tmp_path / "c.pqc").read_bytes()
    (tmp_path / "t.pqc").write_bytes(data[:-3])
    with pytest.raises(FormatError, match="expected .* found"):
        read_codes(tmp_path / "t.pqc")
    (tmp_path / "m.pqc").write_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="magic"):
        read_codes(tmp_path / "m.pqc")
