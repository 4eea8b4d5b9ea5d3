"""Small numerical kernels shared by the rest of the package.

Everything works on float64 numpy arrays.  Shapes are checked explicitly:
no silent broadcasting between operands whose shapes disagree.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Argument outside the domain of the operation."""


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def _nonempty(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[-1] == 0:
        raise DomainError("empty vector")
    return v


def stable_softmax(v) -> np.ndarray:
    """Softmax along the last axis, shifted by the max before exponentiating."""
    v = _nonempty(v)
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_sum_exp(v) -> np.ndarray | float:
    """ln sum(exp(v)) along the last axis."""
    v = _nonempty(v)
    m = v.max(axis=-1, keepdims=True)
    out = np.squeeze(m, -1) + np.log(np.exp(v - m).sum(axis=-1))
    return float(out) if out.ndim == 0 else out


def log_gaussian(y, mu, var):
    """Log density of N(mu, var) at y; `var` is a variance, not a std."""
    var = np.asarray(var, dtype=np.float64)
    if np.any(var <= 0):
        raise DomainError("variance must be positive")
    r = np.asarray(y, dtype=np.float64) - mu
    out = -0.5 * (LOG_2PI + np.log(var)) - r * r / (2.0 * var)
    return float(out) if np.ndim(out) == 0 else out


def normal_cdf(z):
    """Standard normal CDF, erfc-based so both tails keep full relative precision."""
    out = special.ndtr(np.asarray(z, dtype=np.float64))
    return float(out) if np.ndim(out) == 0 else out


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: no overflow for any finite x
    return 0.5 + 0.5 * np.tanh(0.5 * np.asarray(x, dtype=np.float64))


class RngStream:
    """Seeded random stream.

    Backed by numpy's counter-based Philox generator.  Streams are keyed by
    ``(seed, stream_id, *child keys)`` through ``SeedSequence`` spawn keys, so
    ``RngStream(7, 1).child(3, 4)`` always yields the same draws.
    """

    def __init__(self, seed: int, stream_id: int = 0, _key: tuple[int, ...] = ()):
        if seed < 0 or stream_id < 0:
            raise DomainError("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self.key = (self.stream_id,) + tuple(int(k) for k in _key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def child(self, *keys: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, self.key[1:] + tuple(keys))

    def uniform(self, size=None) -> np.ndarray:
        return self.gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self.gen.standard_normal(size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, key={self.key})"
