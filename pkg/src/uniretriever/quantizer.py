"""Product quantization: k-means PQ, retrieval-trained PQ (MoPQ) and ADC scoring.

Codebooks are held as float32 ``(M, P, d_sub)`` arrays because that is what
the tier-one file stores; all arithmetic is carried out in float64.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import DimensionError, Rng

log = logging.getLogger(__name__)

CODEBOOK_MAGIC = b"URCB"
CODES_MAGIC = b"URPQ"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Raised when an index file has the wrong magic, version or length."""


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class Codebook:
    """``M`` sub-codebooks of ``P`` codewords, each ``d_sub`` long."""

    words: np.ndarray

    def __post_init__(self):
        self.words = np.ascontiguousarray(self.words, dtype=np.float32)
        if self.words.ndim != 3:
            raise ValueError("codebook words must have shape (M, P, d_sub)")
        if self.P > 256:
            raise ValueError(f"P={self.P} exceeds 256; codes must fit in a byte")
        if not np.all(np.isfinite(self.words)):
            raise ValueError("codebook contains non-finite codewords")

    @property
    def M(self) -> int:
        return self.words.shape[0]

    @property
    def P(self) -> int:
        return self.words.shape[1]

    @property
    def d_sub(self) -> int:
        return self.words.shape[2]

    @property
    def d(self) -> int:
        return self.M * self.d_sub

    @property
    def nbytes(self) -> int:
        return self.words.nbytes

    def split(self, x: np.ndarray) -> np.ndarray:
        """View ``(..., d)`` vectors as ``(..., M, d_sub)`` segments."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.d:
            raise DimensionError(f"dimension mismatch: {x.shape[-1]} vs codebook d={self.d}")
        return x.reshape(x.shape[:-1] + (self.M, self.d_sub))


def _segments(corpus: np.ndarray, M: int) -> np.ndarray:
    n, d = corpus.shape
    if d % M:
        raise DimensionError(f"d={d} is not divisible by M={M}")
    return corpus.reshape(n, M, d // M)


def _assign(x: np.ndarray, words: np.ndarray, chunk: int = 2048, exact: bool = True):
    """Nearest codeword per row of ``x`` (n, s) against ``words`` (P, s).

    ``exact`` uses explicit differences so exact ties resolve to the lowest
    index; otherwise the faster norm expansion is used (k-means training).
    """
    n = x.shape[0]
    idx = np.empty(n, dtype=np.int64)
    err = np.empty(n, dtype=np.float64)
    wn = np.einsum("pk,pk->p", words, words)
    for lo in range(0, n, chunk):
        xs = x[lo : lo + chunk]
        if exact:
            diff = xs[:, None, :] - words[None, :, :]
            dist = np.einsum("npk,npk->np", diff, diff)
        else:
            dist = np.einsum("nk,nk->n", xs, xs)[:, None] - 2.0 * xs @ words.T + wn[None, :]
            np.maximum(dist, 0.0, out=dist)
        best = np.argmin(dist, axis=1)
        idx[lo : lo + chunk] = best
        err[lo : lo + chunk] = dist[np.arange(len(best)), best]
    return idx, err


def _kmeans(x: np.ndarray, P: int, iters: int, rng: Rng):
    uniq = np.unique(x, axis=0)
    if len(uniq) >= P:
        centroids = uniq[np.sort(rng.choice(len(uniq), P, replace=False))].copy()
    else:
        extra = x[rng.choice(len(x), P - len(uniq), replace=False)]
        centroids = np.concatenate([uniq, extra])
    history = []
    for _ in range(iters):
        assign, err = _assign(x, centroids, exact=False)
        history.append(float(err.mean()))
        counts = np.bincount(assign, minlength=P)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, x)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            # re-seed from the worst-quantized segment
            worst = int(np.argmax(err))
            centroids[j] = x[worst]
            err[worst] = -1.0
    assign, err = _assign(x, centroids, exact=False)
    history.append(float(err.mean()))
    return centroids, history


def train_pq(corpus, M: int = 8, P: int = 256, iters: int = 20, rng: Rng | None = None,
             history: list | None = None) -> Codebook:
    """Learn per-subspace k-means codebooks minimizing reconstruction error.

    Args:
        corpus: ``(n, d)`` training vectors.
        M: number of sub-codebooks; must divide ``d``.
        P: codewords per sub-codebook (at most 256).
        iters: Lloyd iterations per subspace.
        rng: seeded generator for the initial codeword sample.
        history: if given, receives one list of mean squared errors per subspace.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 2:
        raise ValueError("corpus must be a 2-D array")
    if len(corpus) < P:
        raise ValueError(f"need at least P={P} training vectors, got {len(corpus)}")
    if P > 256:
        raise ValueError("P must be <= 256")
    rng = rng or Rng(0)
    segs = _segments(corpus, M)
    words = np.empty((M, P, segs.shape[2]))
    for m in range(M):
        words[m], hist = _kmeans(np.ascontiguousarray(segs[:, m, :]), P, iters, rng.spawn(m))
        if history is not None:
            history.append(hist)
    return Codebook(words)


def encode(cb: Codebook, e) -> np.ndarray:
    """PQ code(s) for one ``(d,)`` vector or a batch ``(n, d)``; dtype uint8."""
    x = cb.split(e)
    single = x.ndim == 2
    if single:
        x = x[None]
    words = cb.words.astype(np.float64)
    codes = np.empty(x.shape[:2], dtype=np.uint8)
    for m in range(cb.M):
        codes[:, m] = _assign(np.ascontiguousarray(x[:, m, :]), words[m])[0]
    return codes[0] if single else codes


def _check_codes(cb: Codebook, code: np.ndarray) -> np.ndarray:
    code = np.asarray(code)
    if code.shape[-1] != cb.M:
        raise DimensionError(f"code length {code.shape[-1]} does not match M={cb.M}")
    if np.any(code < 0) or np.any(code >= cb.P):
        raise ValueError(f"code entry out of range [0, {cb.P})")
    return code.astype(np.int64)


def reconstruct(cb: Codebook, code) -> np.ndarray:
    """Concatenate the selected codewords; accepts one code or a batch."""
    code = _check_codes(cb, code)
    parts = cb.words.astype(np.float64)[np.arange(cb.M), code]
    return parts.reshape(code.shape[:-1] + (cb.d,))


def build_adc(cb: Codebook, q) -> np.ndarray:
    """Table of per-segment inner products ``entries[m, j] = <q_m, C_m^j>``."""
    qs = cb.split(q)
    if qs.ndim != 2:
        raise DimensionError("build_adc expects a single query vector")
    return np.einsum("mk,mpk->mp", qs, cb.words.astype(np.float64))


def approx_ip(table: np.ndarray, code) -> float | np.ndarray:
    """Approximate inner product by table lookup; vectorized over a batch of codes."""
    code = np.asarray(code, dtype=np.int64)
    if code.shape[-1] != table.shape[0]:
        raise DimensionError(f"code length {code.shape[-1]} does not match table M={table.shape[0]}")
    vals = table[np.arange(table.shape[0]), code]
    out = vals.sum(axis=-1)
    return float(out) if code.ndim == 1 else out


# --- retrieval-trained quantization -------------------------------------------------


@dataclass
class MoPQConfig:
    lr: float = 0.005
    steps: int = 300
    batch_size: int = 256
    temperature: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    # also update the encoder through the straight-through path
    train_encoder: bool = False
    # extra uniformly sampled corpus ads used as negatives per step
    corpus_negatives: int = 256
    history: list = field(default_factory=list)


def mopq_loss(q: np.ndarray, a: np.ndarray, words: np.ndarray, temperature: float,
              codes: np.ndarray | None = None, extra: np.ndarray | None = None):
    """In-batch InfoNCE with quantized ads and straight-through gradients.

    Query ``i`` is scored against the quantized version of every ad row; its
    positive is ad row ``i``. Rows of ``extra`` are appended as shared negatives.
    Passing ``codes`` (covering ads then extras) freezes the codeword selection.

    Returns:
        ``(loss, grad_words, grad_q, grad_a, grad_extra)``. ``grad_a`` is the
        straight-through copy of the gradient w.r.t. the quantized ad.
    """
    B = len(q)
    M, P, s = words.shape
    ads = a if extra is None else np.concatenate([a, extra])
    if codes is None:
        codes = np.stack([_assign(ads[:, m * s:(m + 1) * s], words[m])[0] for m in range(M)], axis=1)
    a_hat = words[np.arange(M), codes].reshape(len(ads), M * s)
    logits = q @ a_hat.T / temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.arange(B)
    loss = float(-np.mean(np.log(p[rows, rows])))
    g = p.copy()
    g[rows, rows] -= 1.0
    g /= B * temperature
    grad_q = g @ a_hat
    grad_ahat = g.T @ q
    grad_words = np.zeros_like(words)
    seg_grads = grad_ahat.reshape(len(ads), M, s)
    for m in range(M):
        np.add.at(grad_words[m], codes[:, m], seg_grads[:, m, :])
    return loss, grad_words, grad_q, grad_ahat[:B], grad_ahat[B:]


def train_mopq(train_set, encoder, c0: Codebook, config: MoPQConfig | None = None,
               corpus=None) -> Codebook:
    """Fine-tune codebooks for retrieval with a contrastive objective.

    Args:
        train_set: sequence of ``(query_text, clicked_ad_text)`` pairs.
        encoder: object exposing ``serving_embeddings(texts)`` (and
            ``serving_backward`` when ``config.train_encoder`` is set).
        c0: initial codebook, typically from :func:`train_pq`.
        config: optimizer settings.
        corpus: optional ad texts sampled as additional negatives.

    Raises:
        TrainingDivergedError: if the loss becomes NaN.
    """
    cfg = config or MoPQConfig()
    rng = Rng(cfg.seed)
    words = c0.words.astype(np.float64).copy()
    velocity = np.zeros_like(words)
    queries = [t[0] for t in train_set]
    ads = [t[1] for t in train_set]
    n = len(queries)
    if n == 0:
        raise ValueError("empty training set")
    frozen = not cfg.train_encoder
    if frozen:
        q_all = encoder.serving_embeddings(queries)
        a_all = encoder.serving_embeddings(ads)
        c_all = encoder.serving_embeddings(list(corpus)) if corpus is not None else None
    for step in range(cfg.steps):
        idx = rng.choice(n, min(cfg.batch_size, n), replace=False)
        neg_idx = None
        if corpus is not None and cfg.corpus_negatives:
            neg_idx = rng.choice(len(corpus), min(cfg.corpus_negatives, len(corpus)), replace=False)
        if frozen:
            qb, ab = q_all[idx], a_all[idx]
            eb = c_all[neg_idx] if neg_idx is not None else None
        else:
            qb = encoder.serving_embeddings([queries[i] for i in idx])
            ab = encoder.serving_embeddings([ads[i] for i in idx])
            eb = (encoder.serving_embeddings([corpus[i] for i in neg_idx])
                  if neg_idx is not None else None)
        loss, gw, gq, ga, ge = mopq_loss(qb, ab, words, cfg.temperature, extra=eb)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"MoPQ loss is NaN at step {step}")
        cfg.history.append(loss)
        velocity = cfg.momentum * velocity + gw
        words -= cfg.lr * velocity
        if not frozen and cfg.lr:
            texts = [queries[i] for i in idx] + [ads[i] for i in idx]
            grads = [gq, ga]
            if neg_idx is not None:
                texts += [corpus[i] for i in neg_idx]
                grads.append(ge)
            encoder.serving_backward_step(texts, np.concatenate(grads), cfg.lr)
    return Codebook(words)


# --- file formats --------------------------------------------------------------------

_CB_HEADER = struct.Struct("<4sIIII")
_PQ_HEADER = struct.Struct("<4sIQI")


def write_codebook(cb: Codebook, path) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_CB_HEADER.pack(CODEBOOK_MAGIC, FORMAT_VERSION, cb.M, cb.P, cb.d))
        f.write(cb.words.astype("<f4").tobytes())


def read_codebook(path) -> Codebook:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _CB_HEADER.size:
        raise FormatError(f"{path}: file too short for codebook header")
    magic, version, M, P, d = _CB_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CODEBOOK_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if M == 0 or d % M:
        raise FormatError(f"{path}: d={d} not divisible by M={M}")
    expected = _CB_HEADER.size + P * d * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    words = np.frombuffer(data, dtype="<f4", offset=_CB_HEADER.size).reshape(M, P, d // M)
    return Codebook(words.astype(np.float32))


def write_codes(codes: np.ndarray, path) -> None:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(_PQ_HEADER.pack(CODES_MAGIC, FORMAT_VERSION, codes.shape[0], codes.shape[1]))
        f.write(codes.tobytes())


def read_codes(path) -> np.ndarray:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _PQ_HEADER.size:
        raise FormatError(f"{path}: file too short for code header")
    magic, version, n, M = _PQ_HEADER.unpack_from(data)
    if magic != CODES_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CODES_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _PQ_HEADER.size + n * M
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, offset=_PQ_HEADER.size).reshape(n, M).copy()
