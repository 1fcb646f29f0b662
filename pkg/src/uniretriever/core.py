"""Shared numeric helpers: similarity kernels, normalization and seeded RNG."""

from __future__ import annotations

import numpy as np

#: Reserved ItemId meaning "no neighbor" (all bits set in a u64).
SENTINEL = np.uint64(0xFFFFFFFFFFFFFFFF)

DEFAULT_DIM = 64


class DimensionError(ValueError):
    """Raised when two vectors (or a vector and an index) disagree on dimension."""


def _check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise DimensionError(f"dimension mismatch: {a.shape[-1]} vs {b.shape[-1]}")


def inner_product(a, b) -> float:
    """Return the inner product of two 1-D vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_same_dim(a, b)
    return float(np.dot(a, b))


def l2_normalize(a, eps: float = 0.0) -> np.ndarray:
    """Scale ``a`` to unit L2 norm.

    Raises:
        ValueError: if the vector has zero norm.
    """
    a = np.asarray(a, dtype=np.float64)
    norm = float(np.linalg.norm(a))
    if not norm > eps:
        raise ValueError("cannot normalize a zero vector")
    return a / norm


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Row-wise L2 normalization; zero rows raise."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero row")
    return x / norms


class Rng:
    """Seeded random stream.

    Backed by numpy's PCG64 bit generator, whose output is specified
    bit-for-bit and therefore identical across platforms.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, key: int) -> "Rng":
        """Derive an independent child stream keyed by ``key``."""
        mixed = np.random.SeedSequence([self.seed, int(key)]).generate_state(2, np.uint64)
        return Rng(int(mixed[0]))

    def random(self, size=None):
        return self.gen.random(size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self.gen.choice(a, size=size, replace=replace, p=p)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def lognormal(self, mean=0.0, sigma=1.0, size=None):
        return self.gen.lognormal(mean, sigma, size)
