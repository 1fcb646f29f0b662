"""Synthetic sponsored-search world with planted relevance, CTR and bids.

Ads and queries are points in a 16-d topic space (unit-normalized mixtures of
at most two topic vectors). Text is generated from per-topic vocabularies, so
a bag-of-tokens encoder can recover the geometry. Ads additionally carry a
brand token that determines their popularity.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..core import Rng

log = logging.getLogger(__name__)

GAMMA = 6.0
NOISE_SIGMA = 0.05
TOPIC_DIM = 16
MIN_ADS = 200


@dataclass
class WorldConfig:
    n_ads: int = 10_000
    n_queries: int = 5_000
    n_clicks: int = 20_000
    n_topics: int = 32
    vocab_per_topic: int = 24
    n_brands: int = 64
    # impressions per event: drawn near the query in topic space, plus
    # broad-match impressions drawn by popularity regardless of topic
    impressions_near: int = 6
    impressions_random: int = 2
    impression_sharpness: float = 20.0
    # keyword matching: each query token shared with the ad adds this to the
    # impression logit
    lexical_weight: float = 2.0
    query_tokens: tuple = (3, 8)
    broad_match_power: float = 2.0
    two_topic_fraction: float = 0.6
    test_fraction: float = 0.1
    n_shards: int = 4
    rank_queries: int = 50
    noise_sigma: float = NOISE_SIGMA
    seed: int = 0


def load_config(path, cls=WorldConfig, ignore_unknown: bool = False, **overrides):
    """Read a flat ``key=value`` config file into dataclass ``cls``.

    With ``ignore_unknown`` keys that are not fields of ``cls`` are skipped,
    so one file can configure several commands.
    """
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    values = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                if ignore_unknown:
                    continue
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = val
    values.update({k: v for k, v in overrides.items() if v is not None})
    out = {}
    for k, v in values.items():
        t = types[k] if isinstance(types[k], str) else types[k].__name__
        if isinstance(v, str):
            if t.startswith("int"):
                v = int(v)
            elif t.startswith("float"):
                v = float(v)
            elif t.startswith("bool"):
                v = v.lower() in ("1", "true", "yes", "on")
            elif t.startswith("tuple"):
                v = tuple(int(x) for x in v.strip("()").split(",") if x.strip())
        out[k] = v
    return cls(**out)


# --- counter-based noise so relevance is a fixed function of (query, ad) ---------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _splitmix(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + _GOLD
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def pair_noise(seed: int, q_ids, a_ids) -> np.ndarray:
    """Standard normal noise that depends only on ``(seed, q, a)``."""
    q = np.asarray(q_ids, dtype=np.uint64)
    a = np.asarray(a_ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = _splitmix(np.uint64(seed) ^ (q * np.uint64(0x100000001B3)) ^ (a << np.uint64(20)) ^ a)
        u1 = ((_splitmix(base) >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
        u2 = ((_splitmix(base ^ _GOLD) >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class SyntheticWorld:
    config: WorldConfig
    topics: np.ndarray          # (T, 16) unit vectors
    ad_topic: np.ndarray        # (N, 16) unit topic-space position
    ad_mix: np.ndarray          # (N, T) mixture weights
    ad_text: list
    popularity: np.ndarray      # (N,)
    bid: np.ndarray             # (N,)
    query_topic: np.ndarray     # (Q, 16)
    query_mix: np.ndarray       # (Q, T)
    query_text: list
    train_clicks: np.ndarray    # (n, 2) query id, ad id
    test_clicks: np.ndarray
    shard: np.ndarray           # shard of each train click
    train_queries: np.ndarray
    test_queries: np.ndarray
    noise_sigma: float = NOISE_SIGMA
    noise_seed: int = 0
    # queries with published rank inputs: training queries (for adaptation), then test queries
    rank_train_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    rank_query_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_ads(self) -> int:
        return len(self.ad_text)

    def relevance(self, q_ids, a_ids, zero_noise: bool = False) -> np.ndarray:
        """Planted relevance ``sigmoid(6 <topic(q), topic(a)> + noise)`` (broadcasting)."""
        q_ids, a_ids = np.broadcast_arrays(np.asarray(q_ids), np.asarray(a_ids))
        dot = np.einsum("...k,...k->...", self.query_topic[q_ids], self.ad_topic[a_ids])
        noise = 0.0 if zero_noise else self.noise_sigma * pair_noise(self.noise_seed, q_ids, a_ids)
        return sigmoid(GAMMA * dot + noise)

    def relevance_matrix(self, q_ids, a_ids=None) -> np.ndarray:
        """Relevance of every query in ``q_ids`` against every ad (or ``a_ids``)."""
        q_ids = np.asarray(q_ids)
        a_ids = np.arange(self.n_ads) if a_ids is None else np.asarray(a_ids)
        return self.relevance(q_ids[:, None], a_ids[None, :])

    def click_probability(self, q_ids, a_ids) -> np.ndarray:
        q_ids, a_ids = np.broadcast_arrays(np.asarray(q_ids), np.asarray(a_ids))
        return self.relevance(q_ids, a_ids) * (0.3 + 0.7 * self.popularity[a_ids])

    def rank_inputs(self, q_ids, a_ids):
        """``(ctr, rel, bid)`` arrays for re-ranking (planted values)."""
        q_ids, a_ids = np.broadcast_arrays(np.asarray(q_ids), np.asarray(a_ids))
        return self.click_probability(q_ids, a_ids), self.relevance(q_ids, a_ids), self.bid[a_ids]


class Teacher:
    """Relevance teacher backed by the planted function.

    ``noise`` > 0 adds fresh Gaussian error per call to mimic an imperfect model.
    """

    def __init__(self, world: SyntheticWorld, noise: float = 0.0, rng: Rng | None = None):
        self.world = world
        self.noise = noise
        self.rng = rng or Rng(0)

    def __call__(self, q_ids, a_ids) -> np.ndarray:
        rel = self.world.relevance(q_ids, a_ids)
        if self.noise:
            rel = np.clip(rel + self.noise * self.rng.normal(size=np.shape(rel)), 0.0, 1.0)
        return rel


def _mixtures(n: int, cfg: WorldConfig, rng: Rng):
    T = cfg.n_topics
    mix = np.zeros((n, T))
    first = rng.integers(0, T, n)
    second = (first + rng.integers(1, T, n)) % T
    two = rng.random(n) < cfg.two_topic_fraction
    w = np.where(two, rng.random(n) * 0.5 + 0.5, 1.0)
    mix[np.arange(n), first] = w
    mix[np.arange(n), second] += 1.0 - w
    return mix


def _texts(mix: np.ndarray, lo: int, hi: int, cfg: WorldConfig, rng: Rng, prefix=None) -> list:
    out = []
    lengths = rng.integers(lo, hi + 1, len(mix))
    for i, row in enumerate(mix):
        t_idx = rng.choice(len(row), lengths[i], p=row)
        w_idx = rng.integers(0, cfg.vocab_per_topic, lengths[i])
        toks = [f"t{t:02d}w{w:02d}" for t, w in zip(t_idx, w_idx)]
        if prefix is not None:
            toks.insert(0, prefix[i])
        out.append(" ".join(toks))
    return out


def _bag(texts, vocab: dict) -> sp.csr_matrix:
    """Binary token-presence matrix; ``vocab`` grows as new tokens appear."""
    rows, cols = [], []
    for i, t in enumerate(texts):
        for tok in set(t.split()):
            rows.append(i)
            cols.append(vocab.setdefault(tok, len(vocab)))
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(texts), max(len(vocab), 1)))


def generate(cfg: WorldConfig | None = None, rng: Rng | None = None) -> SyntheticWorld:
    """Generate a deterministic world and click log.

    Raises:
        ValueError: if fewer than 200 ads are requested.
    """
    cfg = cfg or WorldConfig()
    if cfg.n_ads < MIN_ADS:
        raise ValueError(f"need at least {MIN_ADS} ads for Top-200 mining, got {cfg.n_ads}")
    rng = rng or Rng(cfg.seed)
    r_topics, r_ads, r_q, r_clicks, r_split = (rng.spawn(i) for i in range(5))

    topics = r_topics.normal(size=(cfg.n_topics, TOPIC_DIM))
    topics /= np.linalg.norm(topics, axis=1, keepdims=True)

    ad_mix = _mixtures(cfg.n_ads, cfg, r_ads)
    ad_topic = ad_mix @ topics
    ad_topic /= np.linalg.norm(ad_topic, axis=1, keepdims=True)
    brand_pop = r_ads.random(cfg.n_brands)
    brand = r_ads.integers(0, cfg.n_brands, cfg.n_ads)
    popularity = brand_pop[brand]
    ad_text = _texts(ad_mix, 3, 8, cfg, r_ads, prefix=[f"brand{b:02d}" for b in brand])
    bid = r_ads.lognormal(0.0, 0.5, cfg.n_ads)

    q_mix = _mixtures(cfg.n_queries, cfg, r_q)
    q_topic = q_mix @ topics
    q_topic /= np.linalg.norm(q_topic, axis=1, keepdims=True)
    q_text = _texts(q_mix, *cfg.query_tokens, cfg, r_q)

    world = SyntheticWorld(
        config=cfg, topics=topics, ad_topic=ad_topic, ad_mix=ad_mix, ad_text=ad_text,
        popularity=popularity, bid=bid, query_topic=q_topic, query_mix=q_mix, query_text=q_text,
        train_clicks=np.zeros((0, 2), np.int64), test_clicks=np.zeros((0, 2), np.int64),
        shard=np.zeros(0, np.int64), train_queries=np.zeros(0, np.int64),
        test_queries=np.zeros(0, np.int64), noise_sigma=cfg.noise_sigma, noise_seed=cfg.seed,
    )

    # click log: impressions near the query plus a few random ads, Bernoulli clicks
    if cfg.lexical_weight:
        vocab = {}
        ad_bow = _bag(ad_text, vocab)
        q_bow = _bag(q_text, vocab)
        ad_bow.resize(ad_bow.shape[0], len(vocab))
        q_bow.resize(q_bow.shape[0], len(vocab))
    broad_p = popularity**cfg.broad_match_power
    broad_p /= broad_p.sum()
    clicks = []
    n = 0
    while n < cfg.n_clicks:
        q = int(r_clicks.integers(0, cfg.n_queries))
        logits = cfg.impression_sharpness * (ad_topic @ q_topic[q])
        if cfg.lexical_weight:
            logits = logits + cfg.lexical_weight * (ad_bow @ q_bow[q].T).toarray()[:, 0]
        p = np.exp(logits - logits.max())
        p /= p.sum()
        near = r_clicks.choice(cfg.n_ads, cfg.impressions_near, replace=False, p=p)
        rand = r_clicks.choice(cfg.n_ads, cfg.impressions_random, p=broad_p)
        shown = np.unique(np.concatenate([near, rand]))
        hit = r_clicks.random(len(shown)) < world.click_probability(q, shown)
        for a in shown[hit]:
            clicks.append((q, int(a)))
            n += 1
    clicks = np.array(clicks[: cfg.n_clicks], dtype=np.int64)

    perm = r_split.permutation(cfg.n_queries)
    n_test = int(round(cfg.test_fraction * cfg.n_queries))
    test_q = np.sort(perm[:n_test])
    is_test = np.isin(clicks[:, 0], test_q)
    world.train_clicks = clicks[~is_test]
    world.test_clicks = clicks[is_test]
    world.train_queries = np.sort(perm[n_test:])
    world.test_queries = test_q
    world.shard = r_split.integers(0, cfg.n_shards, len(world.train_clicks))
    world.rank_train_ids = np.unique(world.train_clicks[:, 0])[: cfg.rank_queries]
    world.rank_query_ids = np.unique(world.test_clicks[:, 0])[: cfg.rank_queries]
    return world


# --- persistence -----------------------------------------------------------------


def _tsv_field(s: str) -> str:
    return s.replace("\t", " ").replace("\n", " ")


def save_world(world: SyntheticWorld, out) -> None:
    """Write ``world.npz`` plus the human-readable TSV artifacts into ``out``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = dataclasses.asdict(world.config)
    arrays = {k: v for k, v in dataclasses.asdict(world).items() if isinstance(v, np.ndarray)}
    with open(out / "world.npz", "wb") as f:
        np.savez(f, config_keys=np.array(list(cfg)), config_vals=np.array([repr(v) for v in cfg.values()]),
                 ad_text=np.array(world.ad_text), query_text=np.array(world.query_text),
                 noise=np.array([world.noise_sigma, world.noise_seed]), **arrays)
    with open(out / "corpus.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("ad_id\ttext\tpopularity\tbid\n")
        for i, t in enumerate(world.ad_text):
            f.write(f"{i}\t{_tsv_field(t)}\t{world.popularity[i]:.6f}\t{world.bid[i]:.6f}\n")
    with open(out / "queries.tsv", "w", encoding="utf-8", newline="\n") as f:
        f.write("query_id\ttext\tsplit\n")
        test = set(world.test_queries.tolist())
        for i, t in enumerate(world.query_text):
            f.write(f"{i}\t{_tsv_field(t)}\t{'test' if i in test else 'train'}\n")
    write_clicks(out / "clicks.tsv", world, world.train_clicks, world.shard)
    write_clicks(out / "test_clicks.tsv", world, world.test_clicks, np.zeros(len(world.test_clicks), np.int64))
    write_teacher(out / "teacher.tsv", world, np.concatenate([world.train_clicks, world.test_clicks]))
    write_rank_source(out / "ranks.tsv", world, np.concatenate([world.rank_train_ids, world.rank_query_ids]))


def write_clicks(path, world, clicks, shard) -> None:
    """Click triplets: ``query \\t clicked_ad \\t shard \\t query_id \\t ad_id``."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("query\tclicked_ad\tshard\tquery_id\tad_id\n")
        for (q, a), s in zip(clicks, shard):
            f.write(f"{_tsv_field(world.query_text[q])}\t{_tsv_field(world.ad_text[a])}\t{s}\t{q}\t{a}\n")


def write_teacher(path, world, pairs) -> None:
    pairs = np.unique(pairs, axis=0)
    rel = world.relevance(pairs[:, 0], pairs[:, 1])
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("q_id\ta_id\tscore\n")
        for (q, a), s in zip(pairs, rel):
            f.write(f"{q}\t{a}\t{s:.8f}\n")


def write_rank_source(path, world, q_ids) -> None:
    """Rank inputs for every ad under each query in ``q_ids``."""
    a = np.arange(world.n_ads)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("query_id\tad_id\tctr\trel\tbid\n")
        for q in q_ids:
            ctr, rel, bid = world.rank_inputs(np.full(len(a), q), a)
            f.writelines(f"{q}\t{i}\t{c:.8f}\t{r:.8f}\t{b:.8f}\n" for i, c, r, b in zip(a, ctr, rel, bid))


def read_teacher_tsv(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as f:
        next(f)
        for line in f:
            q, a, s = line.rstrip("\n").split("\t")
            out[(int(q), int(a))] = float(s)
    return out


def read_rank_source(path) -> dict:
    """``{(query_id, ad_id): (ctr, rel, bid)}`` from a rank-source TSV."""
    out = {}
    with open(path, encoding="utf-8") as f:
        header = next(f)
        if not header.startswith("query_id"):
            raise ValueError(f"{path}: missing rank-source header")
        for line in f:
            q, a, c, r, b = line.rstrip("\n").split("\t")
            out[(int(q), int(a))] = (float(c), float(r), float(b))
    return out


def load_world(directory) -> SyntheticWorld:
    data = np.load(Path(directory) / "world.npz", allow_pickle=False)
    cfg_kwargs = {}
    import ast

    for k, v in zip(data["config_keys"], data["config_vals"]):
        cfg_kwargs[str(k)] = ast.literal_eval(str(v))
    cfg = WorldConfig(**cfg_kwargs)
    kw = {f.name: data[f.name] for f in dataclasses.fields(SyntheticWorld)
          if f.name in data.files and f.name not in ("ad_text", "query_text")}
    return SyntheticWorld(config=cfg, ad_text=[str(t) for t in data["ad_text"]],
                          query_text=[str(t) for t in data["query_text"]],
                          noise_sigma=float(data["noise"][0]), noise_seed=int(data["noise"][1]), **kw)


# --- vector corpora for index experiments ----------------------------------------


def gaussian_mixture(n: int, d: int = 64, components: int = 64, rank: int = 8,
                     spread: float = 1.5, noise: float = 0.1, rng: Rng | None = None) -> np.ndarray:
    """Gaussian mixture whose components have low-rank covariance plus small isotropic noise."""
    rng = rng or Rng(0)
    centers = rng.normal(size=(components, d))
    bases = rng.normal(size=(components, d, rank)) / np.sqrt(rank)
    lab = rng.integers(0, components, n)
    z = rng.normal(size=(n, rank))
    return centers[lab] + spread * np.einsum("nij,nj->ni", bases[lab], z) + noise * rng.normal(size=(n, d))
