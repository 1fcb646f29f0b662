"""End-to-end experiments over a synthetic world.

Covers the training ladder, index construction from a trained encoder,
code-only retrieval with PQ versus MoPQ codebooks, the tri-stage versus
bi-stage serving comparison and the index benchmark.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..core import Rng
from ..graph import BuildParams, build
from ..quantizer import Codebook, MoPQConfig, build_adc, encode, train_mopq, train_pq
from ..rerank import AdaptConfig, WorldRankSource, adapt_to_rank, bi_stage, psi, tri_stage
from ..search import SearchParams, brute_force_batch, search
from ..store import DiskIndex, TierOne, write_index
from ..trainer.encoder import Encoder
from ..trainer.negatives import BruteForceIndex
from ..trainer.train import ClickDataset, TrainConfig, TrainLog, train
from .metrics import MetricReport, hit_at_k, mrr, ndcg_at_k, recall_at_k
from .world import SyntheticWorld, Teacher

log = logging.getLogger(__name__)

# Each rung adds one change on top of the previous rung.
LADDER = (
    ("Baseline", dict(negatives="random", lambda_rel=0.0, disentangled=False)),
    ("+Multi-obj", dict(lambda_rel=None)),
    ("+Disentangle", dict(disentangled=True)),
    ("+In-batch", dict(negatives="local")),
    ("+Cross-device", dict(negatives="global")),
    ("+ANN negative", dict(hard_negatives="none")),
    ("+Score filter", dict(hard_negatives="score_filter")),
    ("+Rank filter", dict(hard_negatives="rank_filter")),
)


def dataset(world: SyntheticWorld, teacher=None) -> ClickDataset:
    """Training clicks of ``world`` with its planted teacher."""
    return ClickDataset(world.query_text, world.ad_text, world.train_clicks, world.shard,
                        teacher or Teacher(world))


def ladder_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """Cumulative configurations of the ladder; ``base`` supplies everything else.

    The distillation weight of ``base`` is used from the second rung onward.
    """
    out = []
    kw = dataclasses.asdict(base)
    for name, change in LADDER:
        change = {k: (base.lambda_rel if v is None else v) for k, v in change.items()}
        kw.update(change)
        out.append((name, TrainConfig(**kw)))
    return out


# --- evaluation ------------------------------------------------------------------------


def retrieve_exact(enc: Encoder, world: SyntheticWorld, q_ids, K: int) -> np.ndarray:
    """Exact top-K ad ids per query by serving-embedding inner product."""
    index = BruteForceIndex(enc.serving_embeddings(world.ad_text))
    return index.top(enc.serving_embeddings([world.query_text[q] for q in q_ids]), K)


def evaluate_retrieval(world: SyntheticWorld, q_ids, top: np.ndarray, Ks=(10,)) -> MetricReport:
    """Hit@K over test clicks and Rel@K over test queries for ranked lists ``top``."""
    pos = {int(q): i for i, q in enumerate(q_ids)}
    rep = MetricReport()
    clicks = [(q, a) for q, a in world.test_clicks.tolist() if q in pos]
    for K in Ks:
        rep.hit_at[K] = float(np.mean([hit_at_k(top[pos[q]], a, K) for q, a in clicks]))
        rel = world.relevance(np.asarray(q_ids)[:, None], top[:, :K], zero_noise=False)
        rep.rel_at[K] = float(rel.mean())
    return rep


def evaluate_encoder(enc: Encoder, world: SyntheticWorld, Ks=(10,)) -> MetricReport:
    q_ids = np.unique(world.test_clicks[:, 0])
    return evaluate_retrieval(world, q_ids, retrieve_exact(enc, world, q_ids, max(Ks)), Ks)


# --- ladder ----------------------------------------------------------------------------


@dataclass
class LadderRow:
    method: str
    seed: int
    report: MetricReport
    steps: int
    seconds: float


def run_ladder(world: SyntheticWorld, base: TrainConfig | None = None, Ks=(10,),
               methods=None) -> list[LadderRow]:
    """Train and evaluate every ladder rung on ``world``.

    Raises:
        RuntimeError: naming the rung whose training or evaluation failed.
    """
    base = base or TrainConfig()
    data = dataset(world)
    rows = []
    for name, cfg in ladder_configs(base):
        if methods is not None and name not in methods:
            continue
        t0 = time.perf_counter()
        lg = TrainLog()
        try:
            enc = train(data, cfg, log_out=lg)
            rep = evaluate_encoder(enc, world, Ks)
        except Exception as exc:
            raise RuntimeError(f"ladder stage {name!r} failed: {exc}") from exc
        rows.append(LadderRow(name, cfg.seed, rep, lg.steps, time.perf_counter() - t0))
        log.info("%s seed=%d hit@10=%.4f rel@10=%.4f", name, cfg.seed,
                 rep.hit_at.get(10, float("nan")), rep.rel_at.get(10, float("nan")))
    return rows


def ladder_tsv(rows: list[LadderRow], Ks=(10,)) -> str:
    """Per-seed rows followed by per-method means, tab separated."""
    cols = [f"Hit@{K}" for K in Ks] + [f"Rel@{K}" for K in Ks]
    lines = ["method\tseed\t" + "\t".join(cols)]

    def vals(rep):
        return [rep.hit_at[K] for K in Ks] + [rep.rel_at[K] for K in Ks]

    for r in rows:
        lines.append(f"{r.method}\t{r.seed}\t" + "\t".join(f"{v:.4f}" for v in vals(r.report)))
    for name in dict.fromkeys(r.method for r in rows):
        mean = np.mean([vals(r.report) for r in rows if r.method == name], axis=0)
        lines.append(f"{name}\tmean\t" + "\t".join(f"{v:.4f}" for v in mean))
    return "\n".join(lines) + "\n"


# --- index construction ---------------------------------------------------------------


@dataclass
class IndexConfig:
    M: int = 8
    P: int = 256
    pq_iters: int = 20
    R: int = 32
    L_build: int = 64
    alpha: float = 1.2
    passes: int = 2
    quantizer: str = "mopq"  # "pq" or "mopq"
    mopq_steps: int = 300
    mopq_lr: float = 0.005
    mopq_temperature: float = 0.05
    seed: int = 0


def train_codebook(enc: Encoder, world: SyntheticWorld, ad_vecs: np.ndarray, cfg: IndexConfig) -> Codebook:
    rng = Rng(cfg.seed)
    cb = train_pq(ad_vecs, cfg.M, cfg.P, cfg.pq_iters, rng.spawn(0))
    if cfg.quantizer == "pq":
        return cb
    if cfg.quantizer != "mopq":
        raise ValueError(f"unknown quantizer {cfg.quantizer!r}")
    pairs = [(world.query_text[q], world.ad_text[a]) for q, a in world.train_clicks.tolist()]
    mcfg = MoPQConfig(lr=cfg.mopq_lr, steps=cfg.mopq_steps, temperature=cfg.mopq_temperature,
                      seed=int(rng.spawn(1).integers(0, 2**31)))
    return train_mopq(pairs, enc, cb, mcfg, corpus=world.ad_text)


def build_index(enc: Encoder, world: SyntheticWorld, out, cfg: IndexConfig | None = None,
                tier_two: np.ndarray | None = None) -> DiskIndex:
    """Quantize, build the graph and write a two-tier index over the world's ads.

    Args:
        tier_two: optional vectors stored in the posting lists instead of the
            serving embeddings (the graph and codes always use serving vectors).
    """
    cfg = cfg or IndexConfig()
    vecs = enc.serving_embeddings(world.ad_text)
    cb = train_codebook(enc, world, vecs, cfg)
    g = build(vecs, BuildParams(cfg.R, cfg.L_build, cfg.alpha, cfg.passes), Rng(cfg.seed).spawn(2))
    write_index(vecs if tier_two is None else tier_two, g, TierOne(cb, encode(cb, vecs)), out)
    return DiskIndex.open(out)


def with_tier_two(index_dir, vectors, out) -> DiskIndex:
    """Copy of an index whose posting-list vectors are replaced by ``vectors``.

    Codes, codebook, ids and adjacency are kept unchanged.
    """
    from ..graph import VamanaGraph

    src = DiskIndex.open(index_dir)
    f = src.postings
    N, R = f.N, f.R
    adj = np.full((N, R), -1, dtype=np.int64)
    deg = np.zeros(N, dtype=np.int64)
    for r in range(N):
        rec = f.read_record(r)
        nb = f.ranks_of(rec.neighbors) if len(rec.neighbors) else np.zeros(0, dtype=np.int64)
        adj[r, : len(nb)] = nb
        deg[r] = len(nb)
    g = VamanaGraph(adj, deg, int(f.entry_rank))
    write_index(np.asarray(vectors, dtype=np.float32), g, src.tier1, out, ids=f.ids, align=f.align)
    src.close()
    return DiskIndex.open(out)


# --- code-only retrieval (PQ vs MoPQ) ------------------------------------------------


def code_scores(cb: Codebook, codes: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """ADC scores of every coded item for every query: ``(nq, N)``."""
    codes = codes.astype(np.int64)
    out = np.empty((len(queries), len(codes)))
    m_idx = np.arange(cb.M)
    for i, q in enumerate(queries):
        table = build_adc(cb, q)
        out[i] = table[m_idx, codes].sum(axis=1)
    return out


def click_recall_codes(world: SyntheticWorld, enc: Encoder, cb: Codebook, K: int = 100) -> float:
    """Fraction of test clicks whose ad is in the code-only top-K of its query."""
    ads = enc.serving_embeddings(world.ad_text)
    codes = encode(cb, ads)
    q_ids = np.unique(world.test_clicks[:, 0])
    qv = enc.serving_embeddings([world.query_text[q] for q in q_ids])
    scores = code_scores(cb, codes, qv)
    top = np.argpartition(-scores, K - 1, axis=1)[:, :K]
    pos = {int(q): i for i, q in enumerate(q_ids)}
    return float(np.mean([a in set(top[pos[q]].tolist()) for q, a in world.test_clicks.tolist()]))


@dataclass
class QuantizerComparison:
    pq_recall: float
    mopq_recall: float
    K: int


def compare_quantizers(world: SyntheticWorld, enc: Encoder, cfg: IndexConfig | None = None,
                       K: int = 100) -> QuantizerComparison:
    cfg = cfg or IndexConfig()
    ads = enc.serving_embeddings(world.ad_text)
    pq = train_codebook(enc, world, ads, dataclasses.replace(cfg, quantizer="pq"))
    mopq = train_codebook(enc, world, ads, dataclasses.replace(cfg, quantizer="mopq"))
    return QuantizerComparison(click_recall_codes(world, enc, pq, K), click_recall_codes(world, enc, mopq, K), K)


# --- tri-stage vs bi-stage ------------------------------------------------------------


@dataclass
class RerankReport:
    base: MetricReport
    tri_stage: MetricReport
    bi_stage: MetricReport
    psi_evals_bi: int
    psi_evals_tri: int
    n_queries: int


def psi_ground_truth(world: SyntheticWorld, q_id: int, K: int):
    """Psi of every ad for ``q_id`` and the ids of its top-K."""
    a = np.arange(world.n_ads)
    scores = psi(*world.rank_inputs(np.full(len(a), q_id), a))
    top = np.lexsort((a, -scores))[:K]
    return scores, top


def _rank_metrics(items_per_query, gains_per_query, truth_per_query, K) -> MetricReport:
    rep = MetricReport()
    rep.ndcg = float(np.mean([ndcg_at_k(items, g, K) for items, g in zip(items_per_query, gains_per_query)]))
    rep.mrr = float(np.mean([mrr(items, t, K) for items, t in zip(items_per_query, truth_per_query)]))
    rep.recall_at[K] = float(np.mean([recall_at_k(items, t, K)
                                       for items, t in zip(items_per_query, truth_per_query)]))
    return rep


def rerank_experiment(world: SyntheticWorld, enc: Encoder, index_dir, out_dir,
                      adapt_queries=None, eval_queries=None, params: SearchParams | None = None,
                      adapt_cfg: AdaptConfig | None = None, K: int = 10) -> tuple[RerankReport, Encoder]:
    """Adapt the rank head, build the bi-stage index and compare the pipelines.

    Adaptation samples candidates from the base index's verified first-stage
    queue of training queries; evaluation uses held-out queries with the
    brute-force psi ranking over the whole corpus as ground truth.
    """
    params = params or SearchParams(k=K, L_search=100)
    adapt_cfg = adapt_cfg or AdaptConfig()
    src = WorldRankSource(world)
    base_index = DiskIndex.open(index_dir)
    if adapt_queries is None:
        adapt_queries = world.rank_train_ids
    if eval_queries is None:
        eval_queries = world.rank_query_ids
    q_text = [world.query_text[q] for q in adapt_queries]
    route = enc.serving_embeddings(q_text)
    first = [[i for i, _ in search(base_index, route[j], params).candidates] for j in range(len(q_text))]
    adapted = adapt_to_rank(enc, first, list(zip(np.asarray(adapt_queries).tolist(), q_text)),
                            world.ad_text, src, adapt_cfg)
    base_index.close()
    with_tier_two(index_dir, adapted.rank_embeddings(world.ad_text), out_dir).close()
    report = compare_pipelines(world, enc, adapted, index_dir, out_dir, eval_queries, params, K)
    return report, adapted


def compare_pipelines(world: SyntheticWorld, enc: Encoder, adapted: Encoder, index_dir, bi_dir,
                      eval_queries, params: SearchParams, K: int = 10) -> RerankReport:
    """NDCG/MRR/Recall of base, tri-stage and bi-stage serving on ``eval_queries``.

    Ground truth for each query is the brute-force psi ranking of the whole
    corpus; NDCG gains are psi scores.
    """
    src = WorldRankSource(world)
    base_index, bi_index = DiskIndex.open(index_dir), DiskIndex.open(bi_dir)
    q_ids = np.asarray(eval_queries).tolist()
    texts = [world.query_text[q] for q in q_ids]
    route, rank = enc.serving_embeddings(texts), adapted.rank_embeddings(texts)
    items: dict = {"base": [], "tri": [], "bi": []}
    evals = {"tri": 0, "bi": 0}
    gains, truths = [], []
    for j, q in enumerate(q_ids):
        scores, top = psi_ground_truth(world, q, K)
        gains.append({int(a): float(scores[a]) for a in range(world.n_ads)})
        truths.append(set(top.tolist()))
        ranked, base = tri_stage(base_index, route[j], q, params, src, return_base=True)
        items["base"].append([i for i, _ in base.items])
        items["tri"].append([i for i, _ in ranked.items])
        evals["tri"] += ranked.stats.psi_evals
        res = bi_stage(bi_index, route[j], rank[j], params)
        items["bi"].append([i for i, _ in res.items])
        evals["bi"] += res.stats.psi_evals
    base_index.close()
    bi_index.close()
    m = {k: _rank_metrics(v, gains, truths, K) for k, v in items.items()}
    return RerankReport(m["base"], m["tri"], m["bi"], evals["bi"], evals["tri"], len(q_ids))


def rerank_tsv(rep: RerankReport, K: int = 10) -> str:
    lines = [f"method\tNDCG@{K}\tMRR@{K}\tRecall@{K}\tpsi_evals"]
    for name, m, evals in (("Base", rep.base, 0), ("Base+Re-rank", rep.tri_stage, rep.psi_evals_tri),
                           ("Adapt to Re-rank", rep.bi_stage, rep.psi_evals_bi)):
        lines.append(f"{name}\t{m.ndcg:.4f}\t{m.mrr:.4f}\t{m.recall_at[K]:.4f}\t{evals}")
    return "\n".join(lines) + "\n"


# --- benchmark -------------------------------------------------------------------------


@dataclass
class BenchRow:
    method: str
    recall: dict = field(default_factory=dict)
    sector_reads: float = 0.0
    p50_ms: float = 0.0
    p95_ms: float = 0.0


def bench_index(index: DiskIndex, corpus: np.ndarray, queries: np.ndarray, Ks=(100, 500, 1000),
                L_search: int | None = None, beam_width: int = 4, extra_codebooks=None) -> list[BenchRow]:
    """Recall against exact MIPS, I/O and latency for several retrieval methods.

    Methods: ``exact`` (full scan of the tier-two vectors), ``<name>-adc``
    (flat ADC scan of the tier-one codes, one row per codebook) and ``disk``
    (graph search with post-verification).
    """
    Kmax = max(Ks)
    N = len(corpus)
    truth = brute_force_batch(corpus, queries, Kmax)
    codebooks = {"index": (index.tier1.codebook, index.tier1.codes)}
    for name, cb in (extra_codebooks or {}).items():
        codebooks[name] = (cb, encode(cb, corpus))
    L = L_search or Kmax
    rows = []

    def row(name, fn, reads_fn):
        lat, found, reads = [], [], []
        for q in queries:
            t0 = time.perf_counter()
            ids, r = fn(q)
            lat.append(1e3 * (time.perf_counter() - t0))
            found.append(ids)
            reads.append(r)
        rec = {K: float(np.mean([recall_at_k(f, t[:K], K) for f, t in zip(found, truth)])) for K in Ks}
        rows.append(BenchRow(name, rec, float(np.mean(reads)), float(np.percentile(lat, 50)),
                             float(np.percentile(lat, 95))))

    sectors = index.postings.padded_record_size // index.postings.align
    c64 = np.asarray(corpus, dtype=np.float64)

    def exact(q):
        s = c64 @ q
        return np.lexsort((np.arange(N), -s))[:Kmax], N * sectors

    row("exact", exact, None)
    for name, (cb, codes) in codebooks.items():
        def adc(q, cb=cb, codes=codes):
            s = code_scores(cb, codes, q[None])[0]
            return np.lexsort((np.arange(N), -s))[:Kmax], 0

        row(f"{name}-adc", adc, None)
    p = SearchParams(k=Kmax, L_search=max(L, Kmax), beam_width=beam_width)

    def disk(q):
        res = search(index, q, p)
        return [i for i, _ in res.items], res.stats.sector_reads

    row("disk", disk, None)
    return rows


def bench_tsv(rows: list[BenchRow], Ks=(100, 500, 1000)) -> str:
    lines = ["method\t" + "\t".join(f"Recall@{K}" for K in Ks) + "\tsector_reads_per_query\tp50_ms\tp95_ms"]
    for r in rows:
        lines.append(f"{r.method}\t" + "\t".join(f"{r.recall[K]:.4f}" for K in Ks)
                     + f"\t{r.sector_reads:.1f}\t{r.p50_ms:.3f}\t{r.p95_ms:.3f}")
    return "\n".join(lines) + "\n"


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
