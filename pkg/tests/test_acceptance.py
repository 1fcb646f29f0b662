"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest -v tests/test_acceptance.py``; the verdict lines are printed
in an "acceptance criteria" section at the end of the session. The ladder, quantizer and re-rank
criteria train on the full 10^4-ad synthetic world and take several minutes.
"""

from __future__ import annotations

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import fd_check, small_encoder, text  # noqa: E402
from uniretriever.core import Rng  # noqa: E402
from uniretriever.graph import BuildParams, VamanaGraph, build  # noqa: E402
from uniretriever.harness import experiments as ex  # noqa: E402
from uniretriever.harness.world import WorldConfig, gaussian_mixture, generate  # noqa: E402
from uniretriever.quantizer import Codebook, approx_ip, build_adc, encode, mopq_loss, train_pq  # noqa: E402
from uniretriever.rerank import rank_loss  # noqa: E402
from uniretriever.search import SearchParams, search  # noqa: E402
from uniretriever.store import CODES_FILE, POSTING_FILE, DiskIndex, TierOne, write_index  # noqa: E402
from uniretriever.trainer.encoder import dense_grads  # noqa: E402
from uniretriever.trainer.losses import (  # noqa: E402
    LossConfig,
    Triplet,
    distill_loss,
    infonce_loss,
    monolithic_step,
    sharded_contrastive_step,
)
from uniretriever.trainer.train import TrainConfig, train  # noqa: E402

SEEDS = (0, 1, 2)
RESULTS: dict[str, str] = {}


def report(n: int, ok: bool, detail: str, started: float, part: str = "") -> None:
    label = f"{n}{part}"
    line = f"CRITERION {label:>3}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f}s) {detail}"
    RESULTS[label] = line
    print(line)
    assert ok, line


# --- shared fixtures -------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_world():
    """Default 10^4-ad world with an encoder trained under the default configuration."""
    world = generate(WorldConfig(seed=0), Rng(0))
    enc = train(ex.dataset(world), TrainConfig(seed=0))
    return world, enc


def _triplets(rng, B, H):
    return [Triplet(text(rng), text(rng), tuple(text(rng) for _ in range(H)), float(rng.random()),
                    positive_id=i, negative_ids=tuple(1000 + 10 * i + j for j in range(H)))
            for i in range(B)]


# --- 1. gradient compensation ----------------------------------------------------------


def test_criterion_01_gradient_compensation():
    t0 = time.perf_counter()
    worst = 0.0
    for S in (1, 2, 4):
        rng = Rng(100 + S)
        enc = small_encoder(S)
        batch = _triplets(rng, 8, H=1)
        cfg = LossConfig(lambda_rel=0.5, temperature=0.2)
        sharded = sharded_contrastive_step(enc, batch, np.repeat(np.arange(S), 8 // S), S, cfg)
        full = monolithic_step(enc, batch, cfg)
        a, b = dense_grads(sharded.grads, enc), dense_grads(full.grads, enc)
        for k in b:
            worst = max(worst, float(np.abs(a[k] - b[k]).max() / max(np.abs(b[k]).max(), 1e-300)))
    report(1, worst < 1e-9, f"max relative error {worst:.2e} over S in {{1,2,4}}", t0)


# --- 2. gradient correctness -----------------------------------------------------------


def _mopq_fd(seed):
    rng = Rng(seed)
    q, a = rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    words = rng.normal(size=(4, 3, 2))
    codes = encode(Codebook(words), a).astype(np.int64)
    _, gw, *_ = mopq_loss(q, a, words, 0.5, codes=codes)
    h, worst = 1e-5, 0.0
    for idx in np.ndindex(words.shape):
        wp, wm = words.copy(), words.copy()
        wp[idx] += h
        wm[idx] -= h
        fd = (mopq_loss(q, a, wp, 0.5, codes=codes)[0] - mopq_loss(q, a, wm, 0.5, codes=codes)[0]) / (2 * h)
        worst = max(worst, abs(fd - gw[idx]) / max(abs(fd), abs(gw[idx]), 1e-7))
    return worst


def test_criterion_02_gradient_correctness():
    t0 = time.perf_counter()
    worst = {"distill": 0.0, "infonce": 0.0, "mopq": 0.0, "adapt_to_rank": 0.0}
    all_params = ("W1", "b1", "W2", "b2", "W_rel", "W_ctr", "W_rank")
    for seed in range(20):
        rng = Rng(1000 + seed)
        enc = small_encoder(seed)
        q, a, t = text(rng), text(rng), float(rng.random())
        _, g = distill_loss(enc, t, q, a)
        worst["distill"] = max(worst["distill"], fd_check(enc, lambda: distill_loss(enc, t, q, a)[0], g, rng))

        negs = [text(rng) for _ in range(3)]
        cfg = LossConfig(temperature=0.5, include_positive_in_denominator=bool(seed % 2))
        _, g = infonce_loss(enc, q, a, negs, cfg)
        worst["infonce"] = max(worst["infonce"],
                               fd_check(enc, lambda: infonce_loss(enc, q, a, negs, cfg)[0], g, rng))

        worst["mopq"] = max(worst["mopq"], _mopq_fd(seed))

        qs = [text(rng) for _ in range(2)]
        ads = [[text(rng) for _ in range(3)] for _ in qs]
        targets = [rng.random(3) for _ in qs]
        _, g = rank_loss(enc, qs, ads, targets, all_params)
        worst["adapt_to_rank"] = max(worst["adapt_to_rank"], fd_check(
            enc, lambda: rank_loss(enc, qs, ads, targets, all_params)[0], g, rng))
    ok = max(worst.values()) < 1e-4
    report(2, ok, "max relative errors " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()), t0)


# --- 3. ADC exactness ------------------------------------------------------------------


def test_criterion_03_adc_exactness():
    t0 = time.perf_counter()
    rng = Rng(3)
    M, P, d_sub = 8, 256, 8
    cb = Codebook(rng.normal(size=(M, P, d_sub)))
    words = cb.words.astype(np.float64)
    worst = 0.0
    for _ in range(100):
        q = rng.normal(size=M * d_sub)
        codes = rng.integers(0, P, (100, M))
        got = approx_ip(build_adc(cb, q), codes)
        # independent oracle: explicit reconstruction then a float64 dot product
        recon = np.concatenate([words[m][codes[:, m]] for m in range(M)], axis=1)
        worst = max(worst, float(np.abs(got - recon @ q).max()))
    report(3, worst <= 1e-6, f"max |ADC - exact| = {worst:.2e} over 10^4 pairs", t0)


# --- 4. storage round trip -------------------------------------------------------------


def test_criterion_04_storage_round_trip(tmp_path):
    t0 = time.perf_counter()
    N, d, R, M = 1000, 64, 32, 8
    rng = Rng(4)
    x = rng.normal(size=(N, d)).astype(np.float32)
    lists = [rng.choice(np.delete(np.arange(N), i), int(rng.integers(1, R + 1)), replace=False) for i in range(N)]
    g = VamanaGraph.from_lists(lists, R, entry_point=int(rng.integers(0, N)))
    cb = train_pq(x, M=M, P=16, iters=3, rng=Rng(0))
    t1 = TierOne(cb, encode(cb, x))
    ids = rng.choice(2**62, N, replace=False).astype(np.uint64)
    write_index(x, g, t1, tmp_path / "a", ids=ids)
    idx = DiskIndex.open(tmp_path / "a")
    same = True
    for r in range(N):
        rec = idx.postings.read_record(r)
        same &= rec.id == int(ids[r]) and rec.vector.tobytes() == x[r].tobytes()
        same &= np.array_equal(rec.neighbors, ids[g.neighbors(r)])
    # rewrite from what was read and compare whole files
    back = [idx.postings.read_record(r) for r in range(N)]
    rank_of = {int(i): r for r, i in enumerate(ids)}
    g2 = VamanaGraph.from_lists([[rank_of[int(j)] for j in rec.neighbors] for rec in back], R,
                                entry_point=idx.postings.entry_rank)
    write_index(np.stack([rec.vector for rec in back]), g2, idx.tier1, tmp_path / "b",
                ids=np.array([rec.id for rec in back], dtype=np.uint64))
    idx.close()
    files_equal = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                      for f in (POSTING_FILE, CODES_FILE))
    code_bytes = t1.code_bytes
    ok = bool(same) and files_equal and code_bytes == N * M and idx.tier1.codes.nbytes == N * M
    report(4, ok, f"records identical={bool(same)}, rewrite identical={files_equal}, "
                  f"tier-one code bytes={code_bytes} (N*M={N * M})", t0)


# --- 5. ANN quality floor --------------------------------------------------------------


def test_criterion_05_ann_quality_floor(tmp_path):
    t0 = time.perf_counter()
    rng = Rng(5)
    # queries are held-out draws from the same mixture as the corpus
    pool = gaussian_mixture(10_100, d=64, rng=rng)
    x, queries = pool[:10_000].astype(np.float32), pool[10_000:]
    g = build(x, BuildParams(R=32, L_build=64), Rng(0))
    cb = train_pq(x, M=8, P=256, iters=10, rng=Rng(0))
    write_index(x, g, TierOne(cb, encode(cb, x)), tmp_path)
    idx = DiskIndex.open(tmp_path)
    # brute-force MIPS oracle in float64
    truth = np.argsort(-(queries @ x.astype(np.float64).T), axis=1, kind="stable")[:, :10]
    recalls = {}
    for L in (16, 32, 64):
        hits = 0
        for q, t in zip(queries, truth):
            got = {i for i, _ in search(idx, q, SearchParams(k=10, L_search=L)).items}
            hits += len(got & set(t.tolist()))
        recalls[L] = hits / (10 * len(queries))
    idx.close()
    monotone = recalls[16] <= recalls[32] <= recalls[64]
    ok = recalls[64] >= 0.90 and monotone
    report(5, ok, "Recall@10 " + ", ".join(f"L={L}: {r:.3f}" for L, r in recalls.items())
           + f"; monotone={monotone}", t0)


# --- 6. MoPQ beats PQ ------------------------------------------------------------------


def test_criterion_06_mopq_beats_pq(trained_world):
    t0 = time.perf_counter()
    world, enc = trained_world
    cmp = ex.compare_quantizers(world, enc, ex.IndexConfig(seed=0), K=100)
    gain = cmp.mopq_recall - cmp.pq_recall
    report(6, gain >= 0.02, f"code-only Recall@100 PQ={cmp.pq_recall:.4f} MoPQ={cmp.mopq_recall:.4f} "
                            f"(gain {gain:+.4f}, need >= 0.02)", t0)


# --- 7. ladder direction ---------------------------------------------------------------


@pytest.fixture(scope="module")
def ladder():
    t0 = time.perf_counter()
    rows = []
    for s in SEEDS:
        rows.extend(ex.run_ladder(generate(WorldConfig(seed=s), Rng(s)), TrainConfig(seed=s)))
    print(ex.ladder_tsv(rows))
    return rows, t0


def _compare(rows, better, worse, metric):
    """Per-seed differences ``better - worse`` of Hit@10 or Rel@10."""
    get = {(r.method, r.seed): (r.report.hit_at[10] if metric == "hit" else r.report.rel_at[10]) for r in rows}
    return np.array([get[(better, s)] - get[(worse, s)] for s in SEEDS])


def _directional(diff, strict):
    mean_ok = diff.mean() > 0 if strict else diff.mean() >= 0
    return bool(mean_ok and diff.min() >= -0.01)


LADDER_CHECKS = {
    "a": [("+Multi-obj", "Baseline", "hit", True), ("+Multi-obj", "Baseline", "rel", True)],
    "b": [("+Cross-device", "+In-batch", "hit", False)],
    "c": [("+ANN negative", "+Cross-device", "hit", True)],
    "d": [("+Score filter", "+ANN negative", "rel", False), ("+Rank filter", "+ANN negative", "rel", False)],
}


@pytest.mark.parametrize("part", sorted(LADDER_CHECKS))
def test_criterion_07_ladder_direction(ladder, part):
    rows, t0 = ladder
    ok, parts = True, []
    for better, worse, metric, strict in LADDER_CHECKS[part]:
        diff = _compare(rows, better, worse, metric)
        this = _directional(diff, strict)
        ok &= this
        parts.append(f"{better} vs {worse} {metric}@10 per-seed diffs "
                     + " ".join(f"{v:+.4f}" for v in diff) + f" mean {diff.mean():+.4f}")
    report(7, ok, "; ".join(parts), t0, part)


# --- 8. adapt to re-rank ---------------------------------------------------------------


def test_criterion_08_adapt_to_rerank(trained_world, tmp_path):
    t0 = time.perf_counter()
    world, enc = trained_world
    ex.build_index(enc, world, tmp_path / "index", ex.IndexConfig(seed=0)).close()
    # 500 adaptation queries from the training split, 500 held-out evaluation queries
    adapt_q, eval_q = world.train_queries[:500], world.test_queries[:500]
    rep, _ = ex.rerank_experiment(world, enc, tmp_path / "index", tmp_path / "bi", adapt_queries=adapt_q,
                                  eval_queries=eval_q)
    ok = rep.bi_stage.ndcg >= rep.base.ndcg and rep.psi_evals_bi == 0
    report(8, ok, f"{rep.n_queries} queries, NDCG@10 base={rep.base.ndcg:.4f} bi-stage={rep.bi_stage.ndcg:.4f} "
                  f"tri-stage={rep.tri_stage.ndcg:.4f}; bi-stage psi evaluations={rep.psi_evals_bi}", t0)


# --- 9. determinism --------------------------------------------------------------------


def test_criterion_09_cli_determinism(tmp_path):
    from test_cli import run_pipeline

    t0 = time.perf_counter()
    runs = [run_pipeline(tmp_path / f"run{i}") for i in range(2)]
    diffs = []
    for cmd, out in runs[0].items():
        a = {p.relative_to(out): p.read_bytes() for p in out.rglob("*") if p.is_file()}
        other = runs[1][cmd]
        b = {p.relative_to(other): p.read_bytes() for p in other.rglob("*") if p.is_file()}
        if not a or a != b:
            diffs.append(cmd)
    report(9, not diffs, f"{len(runs[0])} commands rerun; differing: {diffs or 'none'}", t0)


# --- 10. negative-count law ------------------------------------------------------------


def test_criterion_10_negative_count_law():
    t0 = time.perf_counter()
    B, bad = 8, []
    for H in (0, 1, 2):
        for with_pos in (True, False):
            cfg = LossConfig(lambda_rel=0.0, include_positive_in_denominator=with_pos)
            for S in (1, 2, 4, 8):
                batch = _triplets(Rng(10 * S + H), B, H)
                res = sharded_contrastive_step(small_encoder(), batch, np.repeat(np.arange(S), B // S), S, cfg)
                want = (B - 1) + H * B + int(with_pos)
                if not np.all(res.n_terms == want):
                    bad.append((S, H, with_pos))
    report(10, not bad, f"terms per query = (B-1)+H(+1) for S in {{1,2,4,8}}; violations: {bad or 'none'}", t0)


if __name__ == "__main__":
    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
