"""Ranking function, rank-oriented embedding adaptation and tri-/bi-stage serving.

The ranking combiner used here is ``ctr * rel * ln(1 + bid)``: it needs both
click propensity and relevance to be nonzero and grows concavely with bid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import Rng
from .search import SearchParams, SearchResult, SearchStats, search
from .store import DiskIndex
from .trainer.encoder import SGD, Encoder, add_grads, grad_norm

log = logging.getLogger(__name__)


def _check_ranges(ctr, rel, bid) -> None:
    if np.any((ctr < 0) | (ctr > 1)) or np.any(~np.isfinite(ctr)):
        raise ValueError("ctr must lie in [0, 1]")
    if np.any((rel < 0) | (rel > 1)) or np.any(~np.isfinite(rel)):
        raise ValueError("rel must lie in [0, 1]")
    if np.any(bid <= 0) or np.any(~np.isfinite(bid)):
        raise ValueError("bid must be positive")


def psi(ctr, rel, bid):
    """Rank score ``ctr * rel * ln(1 + bid)``; scalar or elementwise over arrays."""
    c, r, b = (np.asarray(x, dtype=np.float64) for x in (ctr, rel, bid))
    _check_ranges(c, r, b)
    out = c * r * np.log1p(b)
    return float(out) if out.ndim == 0 else out


# --- rank sources ---------------------------------------------------------------------


class TableRankSource:
    """Rank inputs looked up from a ``{(query_id, ad_id): (ctr, rel, bid)}`` table."""

    def __init__(self, table: dict):
        self.table = table

    def __call__(self, q_id: int, ad_ids):
        try:
            rows = [self.table[(int(q_id), int(a))] for a in ad_ids]
        except KeyError as e:
            raise KeyError(f"no rank inputs for (query, ad) = {e.args[0]}") from None
        arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
        return arr[:, 0], arr[:, 1], arr[:, 2]


class WorldRankSource:
    """Rank inputs computed from a synthetic world's planted functions."""

    def __init__(self, world):
        self.world = world

    def __call__(self, q_id: int, ad_ids):
        ad_ids = np.asarray(ad_ids, dtype=np.int64)
        return self.world.rank_inputs(np.full(len(ad_ids), q_id), ad_ids)


def psi_scores(rank_source: Callable, q_id: int, ad_ids) -> np.ndarray:
    return psi(*rank_source(q_id, ad_ids)) if len(ad_ids) else np.zeros(0)


# --- serving pipelines --------------------------------------------------------------


@dataclass
class RankedList:
    items: list
    stats: SearchStats = field(default_factory=SearchStats)


def tri_stage(index: DiskIndex, q, q_id: int, params: SearchParams, rank_source: Callable,
              return_base: bool = False):
    """Search, verify with the base vectors, then re-rank every verified candidate by psi.

    Ties in psi keep post-verification order. With ``return_base`` the
    post-verification result is returned as well.
    """
    res = search(index, q, params)
    ids = [i for i, _ in res.candidates]
    scores = psi_scores(rank_source, q_id, ids)
    res.stats.psi_evals += len(ids)
    order = sorted(range(len(ids)), key=lambda j: -scores[j])
    ranked = RankedList([(ids[j], float(scores[j])) for j in order[: params.k]], res.stats)
    return (ranked, res) if return_base else ranked


def bi_stage(adapted_index: DiskIndex, q_route, q_rank, params: SearchParams) -> RankedList:
    """Serve from an index whose tier-two vectors are rank-head embeddings.

    Routing uses the serving query embedding against the unchanged codes;
    post-verification scores the cached rank-head vectors with the rank-head
    query embedding and is returned directly, with no psi evaluation.
    """
    res: SearchResult = search(adapted_index, q_route, params, verify_query=q_rank)
    return RankedList(res.items, res.stats)


# --- adaptation ------------------------------------------------------------------------


@dataclass
class AdaptConfig:
    lr: float = 0.005
    epochs: int = 20
    momentum: float = 0.9
    head: int = 50
    tail: int = 50
    queries_per_step: int = 16
    # global gradient-norm cap; the bilinear rank objective can blow up on large-norm heads
    max_grad_norm: float = 1.0
    # rescale the rank head to the target scale before training
    calibrate: bool = True
    train_backbone: bool = False
    seed: int = 0


def sample_candidates(first_stage, head: int, tail: int, rng: Rng) -> np.ndarray:
    """Top ``head`` of a first-stage list plus ``tail`` uniform picks from the rest."""
    first_stage = np.asarray(first_stage, dtype=np.int64)
    top = first_stage[:head]
    rest = first_stage[head:]
    if len(rest) > tail:
        rest = rest[np.sort(rng.choice(len(rest), tail, replace=False))]
    return np.concatenate([top, rest])


def minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    return np.zeros_like(x) if hi == lo else (x - lo) / (hi - lo)


def rank_loss(enc: Encoder, q_texts, ad_texts_per_query, targets_per_query, trainable=("W_rank",)):
    """Mean squared error between ``<rank(q), rank(a)>`` and per-query targets.

    Returns ``(loss, grads)``; only parameters in ``trainable`` get gradients.
    """
    q_texts = list(q_texts)
    sizes = [len(a) for a in ad_texts_per_query]
    texts = q_texts + [t for a in ad_texts_per_query for t in a]
    fw = enc.forward(texts, ("rank",))
    E = fw.out["rank"]
    nq = len(q_texts)
    Q, A = E[:nq], E[nq:]
    owner = np.repeat(np.arange(nq), sizes)
    target = np.concatenate([np.asarray(t, dtype=np.float64) for t in targets_per_query])
    pred = np.sum(Q[owner] * A, axis=1)
    r = pred - target
    n = len(r)
    loss = float(np.mean(r**2))
    gs = 2.0 * r / n
    gA = gs[:, None] * Q[owner]
    gQ = np.zeros_like(Q)
    np.add.at(gQ, owner, gs[:, None] * A)
    return loss, enc.backward(fw, {"rank": np.vstack([gQ, gA])}, trainable)


def _calibrate_rank_head(enc: Encoder, data, ad_text, rank_source, head: int) -> None:
    """Rescale W_rank so the rms of rank-head scores matches the rms of the targets.

    The score is bilinear in W_rank, so a factor ``c`` on the head scales
    every score by ``c**2``. Starting at the right scale keeps plain SGD stable.
    """
    Q = enc.embed([q for _, q, _ in data], "rank")
    preds, targets = [], []
    for (q_id, _, cands), qv in zip(data, Q):
        top = cands[:head]
        preds.append(enc.embed([ad_text[a] for a in top], "rank") @ qv)
        targets.append(minmax(psi_scores(rank_source, q_id, top)))
    p_rms = np.sqrt(np.mean(np.concatenate(preds) ** 2))
    t_rms = np.sqrt(np.mean(np.concatenate(targets) ** 2))
    if p_rms > 0 and t_rms > 0:
        enc.params["W_rank"] *= np.sqrt(t_rms / p_rms)


def adapt_to_rank(enc: Encoder, first_stage, queries, ad_text, rank_source: Callable,
                  cfg: AdaptConfig | None = None, history: list | None = None) -> Encoder:
    """Fit the rank head to per-query normalized psi over first-stage candidates.

    Args:
        enc: trained encoder; a modified copy is returned.
        first_stage: per query, the ordered first-stage ad ids.
        queries: ``(query_id, query_text)`` pairs aligned with ``first_stage``.
        ad_text: text of every ad id.
        rank_source: callable ``(query_id, ad_ids) -> (ctr, rel, bid)``.
        cfg: optimizer and sampling settings.
        history: optional list receiving the per-step loss.
    """
    cfg = cfg or AdaptConfig()
    rng = Rng(cfg.seed)
    out = enc.copy()
    trainable = ("W_rank", "W1", "b1", "W2", "b2") if cfg.train_backbone else ("W_rank",)
    opt = SGD(out, cfg.lr, cfg.momentum, trainable)
    data = []
    for (q_id, q_text), cands in zip(queries, first_stage):
        if len(cands) < 2:
            log.warning("query %s has %d first-stage candidates; skipped", q_id, len(cands))
            continue
        data.append((q_id, q_text, np.asarray(cands, dtype=np.int64)))
    if not data:
        raise ValueError("no query has at least two first-stage candidates")
    if cfg.calibrate and cfg.lr > 0:
        _calibrate_rank_head(out, data, ad_text, rank_source, cfg.head)
    for _ in range(cfg.epochs):
        order = rng.permutation(len(data))
        for lo in range(0, len(order), cfg.queries_per_step):
            chunk = [data[i] for i in order[lo : lo + cfg.queries_per_step]]
            q_texts, a_texts, targets = [], [], []
            for q_id, q_text, cands in chunk:
                sample = sample_candidates(cands, cfg.head, cfg.tail, rng)
                q_texts.append(q_text)
                a_texts.append([ad_text[a] for a in sample])
                targets.append(minmax(psi_scores(rank_source, q_id, sample)))
            loss, grads = rank_loss(out, q_texts, a_texts, targets, trainable)
            if not np.isfinite(loss):
                raise FloatingPointError("rank adaptation diverged")
            if history is not None:
                history.append(loss)
            norm = grad_norm(grads)
            if cfg.max_grad_norm and norm > cfg.max_grad_norm:
                grads = add_grads({}, grads, cfg.max_grad_norm / norm)
            opt.step(grads)
    return out


def spearman(x, y) -> float:
    """Spearman rank correlation (average ranks for ties)."""
    from scipy.stats import spearmanr

    if len(x) < 2:
        raise ValueError("need at least two points")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return 0.0
    rho = spearmanr(x, y).statistic
    return 0.0 if not np.isfinite(rho) else float(rho)
