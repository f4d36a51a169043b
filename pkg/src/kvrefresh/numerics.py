"""Scalar/vector primitives used by every other module.

All functions are pure, operate on float64 numpy arrays, and are safe to
call concurrently. Score vectors are plain 1-D arrays of non-negative
reals whose length equals the number of scored cache positions.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, ContractViolation


def softmax(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over a 1-D vector (max-subtracted)."""
    x = np.asarray(logits, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ContractViolation(f"softmax needs a non-empty 1-D vector, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("softmax input contains NaN or infinity")
    z = np.exp(x - np.max(x))
    return z / z.sum()


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-wise stable softmax over a 2-D array."""
    x = np.asarray(logits, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    An all-zero vector has no direction; similarity is defined as 0.0 so
    downstream threshold checks take the conservative branch.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ContractViolation(f"cosine_similarity shape mismatch: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    sim = float(np.dot(u, v) / (nu * nv))
    return min(1.0, max(-1.0, sim))


def max_pool_1d(scores: np.ndarray, kernel: int) -> np.ndarray:
    """Sliding-window maximum with odd kernel, windows truncated at the edges.

    out[i] = max(scores[i - kernel//2 : i + kernel//2 + 1]) intersected with
    valid indices; output length equals input length.
    """
    if kernel < 1 or kernel % 2 == 0:
        raise ConfigurationError(f"pooling kernel must be odd and positive, got {kernel}")
    x = np.asarray(scores, dtype=np.float64)
    if kernel == 1 or x.size <= 1:
        return x.copy()
    half = kernel // 2
    n = x.size
    out = x.copy()
    for off in range(1, half + 1):
        out[off:] = np.maximum(out[off:], x[:-off])
        out[:-off] = np.maximum(out[:-off], x[off:])
    assert out.shape == x.shape
    return out


def top_k_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest scores, ties broken toward the lower index.

    Result is sorted ascending by position.
    """
    x = np.asarray(scores, dtype=np.float64)
    if k < 1 or k > x.size:
        raise ContractViolation(f"top-k needs 1 <= k <= {x.size}, got {k}")
    # lexsort: primary key descending score, secondary key ascending index.
    order = np.lexsort((np.arange(x.size), -x))
    return np.sort(order[:k])
