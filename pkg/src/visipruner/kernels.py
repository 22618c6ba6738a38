"""Dense numeric kernels shared by the engine, pruner and probes.

Everything runs in float64. ``matmul`` accumulates strictly left to right over
the inner dimension so results are reproducible bit for bit and can be checked
against a plain triple loop.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


class DegenerateRowError(ValueError):
    """Raised when every entry of a softmax row is masked."""


@dataclass
class MacCounter:
    """Tally of multiply-accumulate operations issued through :func:`matmul`."""

    mac_count: int = 0

    def add(self, n: int) -> None:
        if n < 0:
            raise ValueError("MAC increments must be non-negative")
        self.mac_count += int(n)

    def reset(self) -> None:
        self.mac_count = 0


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} has non-finite entries")
    return arr


def matmul(a, b, counter: MacCounter | None = None) -> np.ndarray:
    """Dense product ``a @ b`` with fixed left-to-right accumulation.

    Each output element is ``((a[i,0]*b[0,j] + a[i,1]*b[1,j]) + ...)``, the
    same order a naive triple loop uses. When ``counter`` is given it is
    incremented by ``rows * inner * cols``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    rows, inner = a.shape
    if b.shape[0] != inner:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    cols = b.shape[1]
    out = np.zeros((rows, cols), dtype=np.float64)
    for k in range(inner):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    if counter is not None:
        counter.add(rows * inner * cols)
    return out


def masked_softmax(scores: np.ndarray, allow: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis; disallowed entries come out exactly 0.

    ``allow`` broadcasts against ``scores``. A row with nothing allowed raises
    :class:`DegenerateRowError`.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if allow is None:
        allow = np.ones(scores.shape, dtype=bool)
    else:
        allow = np.broadcast_to(np.asarray(allow, dtype=bool), scores.shape)
    if not np.all(allow.any(axis=-1)):
        raise DegenerateRowError("softmax row has no unmasked entries")
    filled = np.where(allow, scores, -np.inf)
    peak = filled.max(axis=-1, keepdims=True)
    ex = np.where(allow, np.exp(filled - peak), 0.0)
    # correctly rounded row sums: independent of length and order, so
    # removing an exactly-zero entry never changes the other weights
    flat = ex.reshape(-1, ex.shape[-1])
    total = np.array([math.fsum(row) for row in flat]).reshape(ex.shape[:-1] + (1,))
    return ex / total


def masked_softmax_row(scores, mask) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.ndim != 1 or scores.shape != mask.shape:
        raise ShapeError(f"scores {scores.shape} and mask {mask.shape} must be equal-length vectors")
    return masked_softmax(scores, mask)


def rms_norm(x: np.ndarray, scale: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    return x / rms * scale


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def cosine_and_l2(u, v) -> tuple[float, float]:
    """Cosine similarity and Euclidean distance between two vectors.

    The cosine is 0 when either vector has zero norm.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"vector shapes differ: {u.shape} vs {v.shape}")
    # rescale by the largest magnitude so tiny or huge entries neither
    # underflow nor overflow when squared
    diff = u - v
    s = float(np.max(np.abs(diff))) if diff.size else 0.0
    l2 = 0.0 if s == 0.0 else s * float(np.sqrt(np.sum((diff / s) ** 2)))
    mu = float(np.max(np.abs(u))) if u.size else 0.0
    mv = float(np.max(np.abs(v))) if v.size else 0.0
    if mu == 0.0 or mv == 0.0:
        return 0.0, l2
    u, v = u / mu, v / mv
    su, sv = float(np.sum(u * u)), float(np.sum(v * v))
    cos = float(np.sum(u * v)) / float(np.sqrt(su * sv))
    return min(1.0, max(-1.0, cos)), l2
