"""Elementary numerics shared by every other module.

All arithmetic is float64. Random draws go through :func:`make_rng`, which
wraps numpy's PCG64 so that a seed plus an identical call sequence always
reproduces the same stream.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from scipy import special

FD_EPS = 1e-5


def _as_vector(v, name: str = "v") -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-d vector, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def softmax(v) -> np.ndarray:
    arr = _as_vector(v)
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_rows(m: np.ndarray) -> np.ndarray:
    z = m - m.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_distance(a, b) -> float:
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine distance undefined for a zero vector")
    return float(1.0 - np.dot(a, b) / (na * nb))


def cosine_distance_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances between the rows of ``a`` and ``b``."""
    an = a / np.linalg.norm(a, axis=1, keepdims=True)
    bn = b / np.linalg.norm(b, axis=1, keepdims=True)
    return 1.0 - an @ bn.T


def squared_cv(values) -> float:
    """(population std / mean)**2."""
    arr = _as_vector(values, "values")
    mean = arr.mean()
    if mean == 0.0:
        raise ValueError("squared coefficient of variation undefined: zero mean (degenerate batch)")
    return float(arr.var() / mean**2)


def normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("cannot normalize a zero vector")
    return m / norms


def normal_cdf(x):
    return special.ndtr(x)


def finite_diff_gradient(fn: Callable[[np.ndarray], float], x, eps: float = FD_EPS) -> np.ndarray:
    """Central-difference gradient of a scalar function of a parameter vector."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.array(x, dtype=np.float64, copy=True)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(fn(x))
        flat[i] = orig - eps
        lo = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        grad[i] = (hi - lo) / (2.0 * eps)
    return grad.reshape(x.shape)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.uint64(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """Independent substreams derived from a master seed."""
    seqs = np.random.SeedSequence(int(seed)).spawn(n)
    return [np.random.Generator(np.random.PCG64(s)) for s in seqs]


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def rng_from_state(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)
