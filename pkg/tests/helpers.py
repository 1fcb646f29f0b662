"""Shared helpers for the trainer and rerank tests."""

import numpy as np

from uniretriever.core import Rng
from uniretriever.trainer.encoder import Encoder, dense_grads

WORDS = "red blue green shoe boot cheap fast car loan bank phone case".split()


def small_encoder(seed=0, disentangled=True):
    return Encoder(F=64, h=8, d_raw=6, d=4, disentangled=disentangled, rng=Rng(seed), scale=0.5)


def text(rng, lo=2, hi=5):
    return " ".join(rng.choice(WORDS, int(rng.integers(lo, hi + 1))))


def fd_check(enc, loss_fn, grads, rng, n_entries=12):
    """Compare analytic gradients with central differences on random entries."""
    dense = dense_grads(grads, enc)
    h = 1e-5
    worst = 0.0
    for name, g in dense.items():
        p = enc.params[name]
        flat = np.flatnonzero(g) if name == "W1" else np.arange(p.size)
        for i in rng.choice(flat, min(n_entries, len(flat)), replace=False):
            idx = np.unravel_index(i, p.shape)
            old = p[idx]
            p[idx] = old + h
            up = loss_fn()
            p[idx] = old - h
            down = loss_fn()
            p[idx] = old
            fd = (up - down) / (2 * h)
            worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-7))
    return worst
