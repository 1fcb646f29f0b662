"""Bag-of-hashed-tokens encoder with a shared backbone and three projection heads.

    x  -> tanh(x W1 + b1) W2 + b2 = z          (shared backbone)
    z W_rel, z W_ctr, z W_rank                  (heads)

Everything is float64. Gradients are plain dicts keyed by parameter name;
the first-layer gradient is kept sparse as ``(rows, values)`` because a
batch only touches the hashed buckets of its tokens.
"""

from __future__ import annotations

import functools
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from ..core import Rng, normalize_rows
from ..quantizer import FormatError

ENCODER_MAGIC = b"UREN"
ENCODER_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")

PARAM_ORDER = ("W1", "b1", "W2", "b2", "W_rel", "W_ctr", "W_rank")
HEADS = ("rel", "ctr", "rank")


def tokenize(text: str) -> list[str]:
    return text.lower().split()


@functools.lru_cache(maxsize=1 << 20)
def bucket(token: str, F: int) -> int:
    # bucket 0 is reserved for texts without tokens
    return zlib.crc32(token.encode("utf-8")) % (F - 1) + 1


@functools.lru_cache(maxsize=1 << 18)
def _text_features(text: str, F: int):
    toks = tokenize(text)
    if not toks:
        return (0,), (1.0,)
    w = 1.0 / np.sqrt(len(toks))
    acc: dict = {}
    for t in toks:
        b = bucket(t, F)
        acc[b] = acc.get(b, 0.0) + w
    cols = sorted(acc)
    return tuple(cols), tuple(acc[c] for c in cols)


def featurize(texts, F: int) -> sp.csr_matrix:
    """Sparse ``(n, F)`` features: each token adds ``1/sqrt(len)`` to its bucket.

    Texts without tokens map to the reserved bucket 0 with weight 1.
    """
    indptr = [0]
    cols: list = []
    vals: list = []
    for text in texts:
        c, v = _text_features(text, F)
        cols.extend(c)
        vals.extend(v)
        indptr.append(len(cols))
    return sp.csr_matrix((np.array(vals, dtype=np.float64), np.array(cols, dtype=np.int64), np.array(indptr)),
                         shape=(len(indptr) - 1, F))


@dataclass
class Forward:
    X: sp.csr_matrix
    H: np.ndarray
    Z: np.ndarray
    out: dict


class Encoder:
    """Shared-backbone text encoder.

    Args:
        F: hashed feature dimension.
        h: hidden width.
        d_raw: backbone output width.
        d: embedding dimension of every head.
        disentangled: when False the relevance objective reuses the CTR head.
        rng: initialization stream.
        scale: standard deviation of the first-layer weights.
        tied_init: start the relevance head as a copy of the CTR head, so the
            heads only diverge through their own objectives.
    """

    def __init__(self, F: int = 2**15, h: int = 256, d_raw: int = 128, d: int = 64,
                 disentangled: bool = True, rng: Rng | None = None, scale: float = 1.0,
                 tied_init: bool = False):
        rng = rng or Rng(0)
        self.F, self.h, self.d_raw, self.d = F, h, d_raw, d
        self.disentangled = disentangled
        self.params = {
            "W1": rng.normal(0.0, scale, (F, h)),
            "b1": np.zeros(h),
            "W2": rng.normal(0.0, 1.0 / np.sqrt(h), (h, d_raw)),
            "b2": np.zeros(d_raw),
            "W_rel": rng.normal(0.0, 1.0 / np.sqrt(d_raw), (d_raw, d)),
            "W_ctr": rng.normal(0.0, 1.0 / np.sqrt(d_raw), (d_raw, d)),
            "W_rank": rng.normal(0.0, 1.0 / np.sqrt(d_raw), (d_raw, d)),
        }
        if tied_init:
            self.params["W_rel"] = self.params["W_ctr"].copy()

    # --- forward ----------------------------------------------------------------

    def head_weight(self, head: str) -> np.ndarray:
        if head == "rel" and not self.disentangled:
            return self.params["W_ctr"]
        return self.params["W_" + head]

    def forward(self, texts, heads=HEADS) -> Forward:
        p = self.params
        X = featurize(texts, self.F)
        H = np.tanh(X @ p["W1"] + p["b1"])
        Z = H @ p["W2"] + p["b2"]
        out = {name: Z @ self.head_weight(name) for name in heads}
        return Forward(X, H, Z, out)

    def embed(self, texts, head: str) -> np.ndarray:
        return self.forward(list(texts), (head,)).out[head]

    def embed_rel(self, text: str) -> np.ndarray:
        return self.embed([text], "rel")[0]

    def embed_ctr(self, text: str) -> np.ndarray:
        return self.embed([text], "ctr")[0]

    def embed_rank(self, text: str) -> np.ndarray:
        return self.embed([text], "rank")[0]

    def serving_embeddings(self, texts, batch: int = 4096) -> np.ndarray:
        """Sum of the unit-normalized relevance and CTR embeddings, row per text."""
        texts = list(texts)
        out = np.empty((len(texts), self.d))
        for lo in range(0, len(texts), batch):
            fw = self.forward(texts[lo : lo + batch], ("rel", "ctr"))
            try:
                out[lo : lo + batch] = normalize_rows(fw.out["rel"]) + normalize_rows(fw.out["ctr"])
            except ValueError:
                raise ValueError("zero head output; serving embedding undefined") from None
        return out

    def serving_embedding(self, text: str) -> np.ndarray:
        return self.serving_embeddings([text])[0]

    def rank_embeddings(self, texts, batch: int = 4096) -> np.ndarray:
        texts = list(texts)
        return np.concatenate([self.embed(texts[lo : lo + batch], "rank")
                               for lo in range(0, len(texts), batch)]) if texts else np.empty((0, self.d))

    # --- backward ---------------------------------------------------------------

    def backward(self, fw: Forward, grads_out: dict, trainable=None) -> dict:
        """Backpropagate head-output gradients ``{'rel': G, ...}`` to parameters.

        Args:
            fw: cached forward pass.
            grads_out: gradient w.r.t. each head output used.
            trainable: optional set of parameter names to compute.
        """
        p = self.params
        want = set(PARAM_ORDER) if trainable is None else set(trainable)
        g: dict = {}
        dZ = np.zeros_like(fw.Z)
        for head, G in grads_out.items():
            if G is None:
                continue
            name = "W_ctr" if head == "rel" and not self.disentangled else "W_" + head
            if name in want:
                g[name] = g.get(name, 0.0) + fw.Z.T @ G
            dZ += G @ self.head_weight(head).T
        if not want & {"W1", "b1", "W2", "b2"}:
            return g
        if "W2" in want:
            g["W2"] = fw.H.T @ dZ
        if "b2" in want:
            g["b2"] = dZ.sum(axis=0)
        dA = (dZ @ p["W2"].T) * (1.0 - fw.H**2)
        if "b1" in want:
            g["b1"] = dA.sum(axis=0)
        if "W1" in want:
            Xc = fw.X.tocsc()
            rows = np.flatnonzero(np.diff(Xc.indptr))
            g["W1"] = (rows, (Xc[:, rows].T @ dA))
        return g

    def serving_backward(self, texts, grad_serving: np.ndarray, trainable=None) -> dict:
        """Parameter gradients given the gradient w.r.t. :meth:`serving_embeddings` rows."""
        fw = self.forward(list(texts), ("rel", "ctr"))
        g_out = {}
        for head in ("rel", "ctr"):
            E = fw.out[head]
            n = np.linalg.norm(E, axis=1, keepdims=True)
            U = E / n
            g_out[head] = (grad_serving - U * np.sum(U * grad_serving, axis=1, keepdims=True)) / n
        return self.backward(fw, g_out, trainable)

    def serving_backward_step(self, texts, grad_serving: np.ndarray, lr: float) -> None:
        """One plain gradient step through the serving embedding."""
        for k, v in self.serving_backward(texts, grad_serving).items():
            if k == "W1":
                np.add.at(self.params["W1"], v[0], -lr * v[1])
            else:
                self.params[k] -= lr * v

    # --- parameter plumbing -------------------------------------------------------

    def copy(self) -> "Encoder":
        new = Encoder.__new__(Encoder)
        new.F, new.h, new.d_raw, new.d = self.F, self.h, self.d_raw, self.d
        new.disentangled = self.disentangled
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(_HEADER.pack(ENCODER_MAGIC, ENCODER_VERSION, self.F, self.h, self.d_raw, self.d))
            for name in PARAM_ORDER:
                arr = self.head_weight("rel") if name == "W_rel" else self.params[name]
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Encoder":
        path = Path(path)
        data = path.read_bytes()
        if len(data) < _HEADER.size:
            raise FormatError(f"{path}: file too short for encoder header")
        magic, version, F, h, d_raw, d = _HEADER.unpack_from(data)
        if magic != ENCODER_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {ENCODER_MAGIC!r}")
        if version != ENCODER_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        shapes = {"W1": (F, h), "b1": (h,), "W2": (h, d_raw), "b2": (d_raw,),
                  "W_rel": (d_raw, d), "W_ctr": (d_raw, d), "W_rank": (d_raw, d)}
        expected = _HEADER.size + 4 * sum(int(np.prod(s)) for s in shapes.values())
        if len(data) != expected:
            raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
        enc = cls.__new__(cls)
        enc.F, enc.h, enc.d_raw, enc.d = F, h, d_raw, d
        enc.disentangled = True
        enc.params = {}
        off = _HEADER.size
        for name in PARAM_ORDER:
            n = int(np.prod(shapes[name]))
            enc.params[name] = np.frombuffer(data, "<f4", n, off).reshape(shapes[name]).astype(np.float64)
            off += 4 * n
        return enc


def add_grads(total: dict, g: dict, scale: float = 1.0) -> dict:
    """Accumulate ``scale * g`` into ``total`` (sparse W1 entries are concatenated)."""
    for k, v in g.items():
        if k == "W1":
            rows, vals = v
            if k in total:
                r0, v0 = total[k]
                total[k] = (np.concatenate([r0, rows]), np.concatenate([v0, scale * vals]))
            else:
                total[k] = (rows, scale * vals)
        else:
            total[k] = total[k] + scale * v if k in total else scale * v
    return total


def grad_norm(g: dict) -> float:
    """Global l2 norm of a gradient dict, merging duplicate sparse W1 rows."""
    total = 0.0
    for k, v in g.items():
        if k == "W1":
            rows, vals = v
            uniq, inv = np.unique(rows, return_inverse=True)
            merged = np.zeros((len(uniq), vals.shape[1]))
            np.add.at(merged, inv, vals)
            total += float(np.sum(merged**2))
        else:
            total += float(np.sum(np.asarray(v) ** 2))
    return float(np.sqrt(total))


def dense_grads(g: dict, enc: Encoder) -> dict:
    """Materialize a gradient dict with a dense W1 (for tests and checks)."""
    out = {}
    for k, v in g.items():
        if k == "W1":
            W = np.zeros((enc.F, enc.h))
            np.add.at(W, v[0], v[1])
            out[k] = W
        else:
            out[k] = np.array(v, dtype=np.float64)
    return out


class SGD:
    """Plain SGD with optional momentum.

    The first-layer velocity is updated only on rows that have ever received
    gradient, which is exact because untouched rows have zero velocity.
    """

    def __init__(self, enc: Encoder, lr: float, momentum: float = 0.0, trainable=None):
        self.enc, self.lr, self.momentum = enc, lr, momentum
        self.trainable = set(PARAM_ORDER if trainable is None else trainable)
        if not enc.disentangled:
            self.trainable.discard("W_rel")
        self.velocity = {k: np.zeros_like(v) for k, v in enc.params.items() if k in self.trainable}
        self.active = np.zeros(enc.F, dtype=bool)

    def step(self, g: dict) -> None:
        p = self.enc.params
        mu = self.momentum
        for k in self.trainable:
            if k == "W1":
                dense_rows = np.zeros(0, dtype=np.int64)
                if k in g:
                    rows, vals = g[k]
                    uniq, inv = np.unique(rows, return_inverse=True)
                    gsum = np.zeros((len(uniq), self.enc.h))
                    np.add.at(gsum, inv, vals)
                    self.active[uniq] = True
                    dense_rows = uniq
                act = np.flatnonzero(self.active)
                if not len(act):
                    continue
                v = self.velocity[k]
                v[act] *= mu
                if len(dense_rows):
                    v[dense_rows] += gsum
                p[k][act] -= self.lr * v[act]
                continue
            grad = g.get(k)
            v = self.velocity[k]
            v *= mu
            if grad is not None:
                v += grad
            p[k] -= self.lr * v
