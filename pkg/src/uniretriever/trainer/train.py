"""Joint distillation + contrastive training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..core import Rng
from ..quantizer import TrainingDivergedError
from .encoder import SGD, Encoder
from .losses import LossConfig, Triplet, sharded_contrastive_step
from .negatives import NEIGHBORHOOD, BruteForceIndex, select_negatives

log = logging.getLogger(__name__)

NEGATIVE_MODES = ("random", "local", "global")
HARD_MODES = ("off", "none", "score_filter", "rank_filter")


@dataclass
class ClickDataset:
    """Click pairs over id-addressed query and ad texts.

    Attributes:
        query_text: text of every query id.
        ad_text: text of every ad id (the corpus).
        pairs: ``(n, 2)`` array of ``(query_id, clicked_ad_id)``.
        shard: shard of each pair.
        teacher: callable ``(query_ids, ad_ids) -> relevance`` in [0, 1].
    """

    query_text: Sequence[str]
    ad_text: Sequence[str]
    pairs: np.ndarray
    shard: np.ndarray
    teacher: Callable

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.shard = np.asarray(self.shard, dtype=np.int64)
        if len(self.shard) != len(self.pairs):
            raise ValueError("every click pair needs a shard")

    def clicked_by_query(self) -> dict:
        out: dict = {}
        for q, a in self.pairs.tolist():
            out.setdefault(q, set()).add(a)
        return out


@dataclass
class TrainConfig:
    batch_size: int = 128
    S: int = 4
    epochs: int = 3
    lr: float = 0.05
    momentum: float = 0.9
    temperature: float = 0.05
    lambda_rel: float = 1.0
    disentangled: bool = True
    tied_init: bool = True
    include_positive_in_denominator: bool = True
    # random: per-query uniform corpus negatives only; local: same-shard
    # in-batch negatives; global: cross-device in-batch negatives
    negatives: str = "global"
    random_negatives: int = 10
    # off: no mining; none/score_filter/rank_filter: ANN mining modes
    hard_negatives: str = "off"
    n_hard: int = 4
    refresh_every: int = 1
    # epochs trained before the first mining round
    hard_warmup: int = 1
    # encoder shape
    F: int = 2**15
    h: int = 256
    d_raw: int = 128
    d: int = 64
    max_steps: int = -1
    seed: int = 0

    def __post_init__(self):
        if self.negatives not in NEGATIVE_MODES:
            raise ValueError(f"negatives must be one of {NEGATIVE_MODES}")
        if self.hard_negatives not in HARD_MODES:
            raise ValueError(f"hard_negatives must be one of {HARD_MODES}")
        if self.batch_size % self.S:
            raise ValueError("batch_size must be divisible by S")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    steps: int = 0


def _batches(shard: np.ndarray, S: int, per_shard: int, rng: Rng):
    """Yield index arrays with ``per_shard`` examples from each of ``S`` shard streams."""
    streams = [rng.permutation(np.flatnonzero(shard % S == s)) for s in range(S)]
    n = min(len(st) for st in streams) // per_shard
    if n == 0:
        raise ValueError("not enough pairs per shard for one batch")
    for b in range(n):
        yield np.concatenate([st[b * per_shard : (b + 1) * per_shard] for st in streams])


def mine_all(enc: Encoder, data: ClickDataset, mode: str, n: int, rng: Rng,
             clicked: dict | None = None) -> dict:
    """Hard negatives for every training query: ``{query_id: ad id array}``."""
    clicked = clicked or data.clicked_by_query()
    index = BruteForceIndex(enc.serving_embeddings(data.ad_text))
    if len(index) < NEIGHBORHOOD:
        raise ValueError(f"hard-negative mining needs at least {NEIGHBORHOOD} ads")
    q_ids = np.array(sorted(clicked), dtype=np.int64)
    q_vecs = enc.serving_embeddings([data.query_text[q] for q in q_ids])
    neigh = index.top(q_vecs, NEIGHBORHOOD)
    rel = data.teacher(np.repeat(q_ids[:, None], NEIGHBORHOOD, axis=1), neigh)
    before = select_negatives.fallbacks
    out = {int(q): select_negatives(neigh[i], rel[i], mode, n, rng, clicked[int(q)], warn=False)
           for i, q in enumerate(q_ids)}
    fell = select_negatives.fallbacks - before
    if fell:
        log.warning("score filter fell back to rank filter for %d of %d queries", fell, len(q_ids))
    return out


def train(data: ClickDataset, cfg: TrainConfig | None = None, schedule=None,
          encoder: Encoder | None = None, log_out: TrainLog | None = None) -> Encoder:
    """Train an encoder on click pairs.

    Each step minimizes the sharded contrastive loss plus ``lambda_rel`` times
    the mean distillation error over the (query, clicked ad) pairs.

    Args:
        data: click pairs with teacher access.
        cfg: training configuration.
        schedule: optional per-epoch learning-rate multipliers.
        encoder: optional starting encoder (otherwise freshly initialized).
        log_out: optional container receiving per-step losses.

    Raises:
        TrainingDivergedError: when the loss becomes non-finite.
    """
    cfg = cfg or TrainConfig()
    rng = Rng(cfg.seed)
    r_init, r_batch, r_neg, r_mine = (rng.spawn(i) for i in range(4))
    enc = encoder or Encoder(cfg.F, cfg.h, cfg.d_raw, cfg.d, cfg.disentangled, r_init,
                                 tied_init=cfg.tied_init)
    enc.disentangled = cfg.disentangled
    opt = SGD(enc, cfg.lr, cfg.momentum)
    loss_cfg = LossConfig(lambda_rel=cfg.lambda_rel, temperature=cfg.temperature,
                          include_positive_in_denominator=cfg.include_positive_in_denominator)
    mode = "own" if cfg.negatives == "random" else cfg.negatives
    S = 1 if mode == "own" else cfg.S
    clicked = data.clicked_by_query()
    hard: dict = {}
    log_out = log_out if log_out is not None else TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        if schedule is not None:
            opt.lr = cfg.lr * schedule[min(epoch, len(schedule) - 1)]
        if (cfg.hard_negatives != "off" and epoch >= cfg.hard_warmup
                and (epoch - cfg.hard_warmup) % cfg.refresh_every == 0):
            hard = mine_all(enc, data, cfg.hard_negatives, cfg.n_hard, r_mine, clicked)
        for idx in _batches(data.shard, cfg.S, cfg.batch_size // cfg.S, r_batch):
            if 0 <= cfg.max_steps <= step:
                return enc
            q_ids, a_ids = data.pairs[idx, 0], data.pairs[idx, 1]
            teacher = data.teacher(q_ids, a_ids) if cfg.lambda_rel > 0 else np.zeros(len(idx))
            batch = []
            for q, a, t in zip(q_ids.tolist(), a_ids.tolist(), teacher.tolist()):
                neg = np.zeros(0, dtype=np.int64)
                if cfg.negatives == "random":
                    neg = r_neg.integers(0, len(data.ad_text), cfg.random_negatives)
                if hard:
                    neg = np.concatenate([neg, hard.get(q, np.zeros(0, dtype=np.int64))])
                neg = neg.tolist()
                batch.append(Triplet(data.query_text[q], data.ad_text[a],
                                     tuple(data.ad_text[j] for j in neg), t, a, tuple(neg)))
            shard_of = (data.shard[idx] % cfg.S) if S > 1 else np.zeros(len(idx), dtype=np.int64)
            res = sharded_contrastive_step(enc, batch, shard_of, S, loss_cfg, negatives=mode)
            if not np.isfinite(res.loss):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            opt.step(res.grads)
            log_out.losses.append(res.loss)
            step += 1
            log_out.steps = step
    return enc
