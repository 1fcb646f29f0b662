"""Distillation and contrastive losses with analytic gradients.

Loss functions here work on embedding matrices and return gradients with
respect to those matrices; :class:`Encoder.backward` carries them further.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import Encoder, add_grads


@dataclass
class LossConfig:
    lambda_rel: float = 1.0
    temperature: float = 0.05
    include_positive_in_denominator: bool = True
    # compare unit-normalized head outputs; False uses raw inner products
    normalize: bool = True
    # "squared" or "abs" distillation error
    distill_error: str = "squared"


def _unit(E: np.ndarray):
    n = np.linalg.norm(E, axis=1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero embedding cannot be normalized")
    return E / n, n


def _unit_backward(U: np.ndarray, n: np.ndarray, gU: np.ndarray) -> np.ndarray:
    return (gU - U * np.sum(U * gU, axis=1, keepdims=True)) / n


def distill_terms(Eq: np.ndarray, Ea: np.ndarray, teacher: np.ndarray, cfg: LossConfig):
    """Mean distillation error over aligned rows of ``Eq``/``Ea``.

    Returns ``(loss, grad_Eq, grad_Ea)``.
    """
    teacher = np.asarray(teacher, dtype=np.float64)
    B = len(teacher)
    if cfg.normalize:
        Uq, nq = _unit(Eq)
        Ua, na = _unit(Ea)
    else:
        Uq, Ua = Eq, Ea
    sim = np.sum(Uq * Ua, axis=1)
    r = sim - teacher
    if cfg.distill_error == "abs":
        loss = float(np.mean(np.abs(r)))
        gs = np.sign(r) / B
    else:
        loss = float(np.mean(r**2))
        gs = 2.0 * r / B
    gUq = gs[:, None] * Ua
    gUa = gs[:, None] * Uq
    if cfg.normalize:
        return loss, _unit_backward(Uq, nq, gUq), _unit_backward(Ua, na, gUa)
    return loss, gUq, gUa


def contrastive_terms(Eq: np.ndarray, Ea: np.ndarray, pos: np.ndarray, cfg: LossConfig,
                      mask: np.ndarray | None = None):
    """Mean InfoNCE over queries against a shared pool of ads.

    Args:
        Eq: ``(B, d)`` query embeddings.
        Ea: ``(n, d)`` ad embeddings; row ``pos[i]`` is query ``i``'s positive.
        pos: positive ad row per query.
        cfg: temperature / normalization / denominator settings.
        mask: optional ``(B, n)`` boolean; False removes an ad from query
            ``i``'s candidate set. The positive is always kept in the numerator.

    Returns:
        ``(loss, grad_Eq, grad_Ea, n_terms)`` where ``n_terms[i]`` counts the
        denominator terms of query ``i``.
    """
    B = len(Eq)
    pos = np.asarray(pos, dtype=np.int64)
    if cfg.normalize:
        Uq, nq = _unit(Eq)
        Ua, na = _unit(Ea)
    else:
        Uq, Ua = Eq, Ea
    logits = Uq @ Ua.T / cfg.temperature
    rows = np.arange(B)
    allowed = np.ones(logits.shape, dtype=bool) if mask is None else mask.copy()
    allowed[rows, pos] = cfg.include_positive_in_denominator
    if np.any(allowed.sum(axis=1) == 0):
        raise ValueError("a query has no negatives")
    z = np.where(allowed, logits, -np.inf)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.where(allowed, np.exp(z - zmax), 0.0)
    denom = ez.sum(axis=1)
    lse = np.log(denom) + zmax[:, 0]
    loss = float(np.mean(lse - logits[rows, pos]))
    soft = ez / denom[:, None]
    gl = soft
    gl[rows, pos] -= 1.0
    gl /= B * cfg.temperature
    gUq = gl @ Ua
    gUa = gl.T @ Uq
    if cfg.normalize:
        gEq, gEa = _unit_backward(Uq, nq, gUq), _unit_backward(Ua, na, gUa)
    else:
        gEq, gEa = gUq, gUa
    return loss, gEq, gEa, allowed.sum(axis=1)


# --- single-instance entry points ---------------------------------------------------


def distill_loss(enc: Encoder, teacher_score: float, q: str, a: str, cfg: LossConfig | None = None,
                 trainable=None):
    """Distillation error for one (query, ad) pair; returns ``(loss, grads)``."""
    if not 0.0 <= teacher_score <= 1.0:
        raise ValueError("teacher score must lie in [0, 1]")
    cfg = cfg or LossConfig()
    fw = enc.forward([q, a], ("rel",))
    E = fw.out["rel"]
    loss, gq, ga = distill_terms(E[:1], E[1:], np.array([teacher_score]), cfg)
    return loss, enc.backward(fw, {"rel": np.vstack([gq, ga])}, trainable)


def infonce_loss(enc: Encoder, q: str, pos: str, negs, cfg: LossConfig | None = None, trainable=None):
    """Contrastive loss of one query against its positive and ``negs``."""
    negs = list(negs)
    if not negs:
        raise ValueError("need at least one negative")
    cfg = cfg or LossConfig()
    fw = enc.forward([q, pos] + negs, ("ctr",))
    E = fw.out["ctr"]
    loss, gq, ga, _ = contrastive_terms(E[:1], E[1:], np.array([0]), cfg)
    return loss, enc.backward(fw, {"ctr": np.vstack([gq, ga])}, trainable)


# --- sharded (cross-device) step ------------------------------------------------------


@dataclass
class Triplet:
    query: str
    positive: str
    negatives: tuple = ()
    teacher: float | None = None
    # id of the clicked ad; negatives with the same id are masked out
    positive_id: int | None = None
    negative_ids: tuple = ()


@dataclass
class StepResult:
    loss: float
    contrastive: float
    distill: float
    grads: dict
    n_terms: np.ndarray


def _pool(batch):
    """Ad pool layout: all positives first, then every hard negative."""
    B = len(batch)
    ads, ids, owner = [t.positive for t in batch], [t.positive_id for t in batch], list(range(B))
    for i, t in enumerate(batch):
        ads.extend(t.negatives)
        ids.extend(t.negative_ids if t.negative_ids else [None] * len(t.negatives))
        owner.extend([i] * len(t.negatives))
    return ads, ids, np.array(owner)


def candidate_mask(batch, shard_of, mode: str, mask_duplicates: bool = True) -> np.ndarray:
    """Which pooled ads may serve as negatives for each query.

    ``mode`` is ``"global"`` (every pooled ad, the cross-device setting),
    ``"local"`` (only ads encoded on the query's own shard) or ``"own"``
    (only the query's own positive and negatives).
    """
    B = len(batch)
    _, ids, owner = _pool(batch)
    shard_of = np.asarray(shard_of)
    if mode == "global":
        m = np.ones((B, len(owner)), dtype=bool)
    elif mode == "local":
        m = shard_of[:, None] == shard_of[owner][None, :]
    elif mode == "own":
        m = np.arange(B)[:, None] == owner[None, :]
    else:
        raise ValueError(f"unknown negative mode {mode!r}")
    if mask_duplicates:
        pid = np.array([-1 if t.positive_id is None else t.positive_id for t in batch])
        aid = np.array([-1 if a is None else a for a in ids])
        dup = (pid[:, None] == aid[None, :]) & (pid[:, None] >= 0)
        dup[np.arange(B), np.arange(B)] = False
        m &= ~dup
    return m


def _loss_and_embedding_grads(Q_ctr, A_ctr, Q_rel, P_rel, batch, mask, cfg):
    B = len(batch)
    c_loss, gQ, gA, n_terms = contrastive_terms(Q_ctr, A_ctr, np.arange(B), cfg, mask)
    d_loss, gQr, gPr = 0.0, None, None
    if cfg.lambda_rel > 0 and Q_rel is not None:
        teacher = np.array([t.teacher for t in batch], dtype=np.float64)
        d_loss, gQr, gPr = distill_terms(Q_rel, P_rel, teacher, cfg)
        gQr, gPr = cfg.lambda_rel * gQr, cfg.lambda_rel * gPr
    return c_loss, d_loss, gQ, gA, gQr, gPr, n_terms


def sharded_contrastive_step(enc: Encoder, batch, shard_of, S: int, cfg: LossConfig,
                             negatives: str = "global", mask_duplicates: bool = True,
                             trainable=None) -> StepResult:
    """Emulate data-parallel training over ``S`` shards with gradient compensation.

    1. each shard encodes its own triplets;
    2. all embeddings are broadcast (copies carry no gradient path);
    3. every shard evaluates the full loss for all queries against all ads;
    4. each shard backpropagates only into embeddings it encoded itself.

    Summing the per-shard parameter gradients reproduces the monolithic
    gradient exactly.
    """
    B = len(batch)
    if B == 0 or S < 1:
        raise ValueError("need a non-empty batch and S >= 1")
    shard_of = np.asarray(shard_of, dtype=np.int64)
    if shard_of.shape != (B,) or shard_of.min() < 0 or shard_of.max() >= S:
        raise ValueError("every triplet needs a shard in 0..S-1")
    counts = np.bincount(shard_of, minlength=S)
    if np.any(counts == 0):
        raise ValueError(f"shard {int(np.flatnonzero(counts == 0)[0])} has zero triplets")
    use_rel = cfg.lambda_rel > 0
    heads = ("ctr", "rel") if use_rel else ("ctr",)
    ads, _, owner = _pool(batch)
    n_ads = len(ads)

    # phase 1: local encoding
    local = []
    Q = {h: np.empty((B, enc.d)) for h in heads}
    A = {h: np.empty((n_ads, enc.d)) for h in heads}
    for s in range(S):
        qi = np.flatnonzero(shard_of == s)
        ai = np.flatnonzero(shard_of[owner] == s)
        fw = enc.forward([batch[i].query for i in qi] + [ads[j] for j in ai], heads)
        for h in heads:
            Q[h][qi] = fw.out[h][: len(qi)]
            A[h][ai] = fw.out[h][len(qi):]
        local.append((qi, ai, fw))

    # phase 2/3: broadcast copies; each shard computes the full loss
    mask = candidate_mask(batch, shard_of, negatives, mask_duplicates)
    total: dict = {}
    loss = c_loss = d_loss = 0.0
    n_terms = None
    for s, (qi, ai, fw) in enumerate(local):
        Qb = {h: Q[h].copy() for h in heads}
        Ab = {h: A[h].copy() for h in heads}
        c_loss, d_loss, gQ, gA, gQr, gPr, n_terms = _loss_and_embedding_grads(
            Qb["ctr"], Ab["ctr"], Qb.get("rel"), Ab["rel"][:B] if use_rel else None, batch, mask, cfg)
        # phase 4: keep only gradients of locally encoded rows
        g_out = {"ctr": np.vstack([gQ[qi], gA[ai]])}
        if use_rel:
            gAr = np.zeros((n_ads, enc.d))
            gAr[:B] = gPr
            g_out["rel"] = np.vstack([gQr[qi], gAr[ai]])
        add_grads(total, enc.backward(fw, g_out, trainable))
    loss = c_loss + cfg.lambda_rel * d_loss if use_rel else c_loss
    return StepResult(loss, c_loss, d_loss, total, n_terms)


def monolithic_step(enc: Encoder, batch, cfg: LossConfig, negatives_mask=None,
                    mask_duplicates: bool = True, trainable=None) -> StepResult:
    """Reference computation: one forward/backward over the whole batch."""
    B = len(batch)
    use_rel = cfg.lambda_rel > 0
    heads = ("ctr", "rel") if use_rel else ("ctr",)
    ads, _, _ = _pool(batch)
    fw = enc.forward([t.query for t in batch] + ads, heads)
    mask = negatives_mask
    if mask is None:
        mask = candidate_mask(batch, np.zeros(B, dtype=np.int64), "global", mask_duplicates)
    c_loss, d_loss, gQ, gA, gQr, gPr, n_terms = _loss_and_embedding_grads(
        fw.out["ctr"][:B], fw.out["ctr"][B:], fw.out["rel"][:B] if use_rel else None,
        fw.out["rel"][B : 2 * B] if use_rel else None, batch, mask, cfg)
    g_out = {"ctr": np.vstack([gQ, gA])}
    if use_rel:
        g_rel = np.zeros((B + len(ads), enc.d))
        g_rel[:B] = gQr
        g_rel[B : 2 * B] = gPr
        g_out["rel"] = g_rel
    grads = enc.backward(fw, g_out, trainable)
    loss = c_loss + cfg.lambda_rel * d_loss if use_rel else c_loss
    return StepResult(loss, c_loss, d_loss, grads, n_terms)
