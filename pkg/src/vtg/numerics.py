"""Small dense linear-algebra helpers and a central-difference gradient oracle.

Matrices are plain 2-D float64 numpy arrays in C (row-major) order.
"""
from __future__ import annotations

from typing import Callable

import numpy as np


def as_matrix(x, dtype=np.float64) -> np.ndarray:
    """Return ``x`` as a finite, C-contiguous 2-D array."""
    m = np.ascontiguousarray(np.asarray(x, dtype=dtype))
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix contains non-finite entries")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    out = a @ b
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("matmul produced non-finite values")
    return out


def softmax(v, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax along ``axis`` (max-subtracted)."""
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError("softmax input contains non-finite entries")
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad_p: np.ndarray, axis: int = -1) -> np.ndarray:
    """Gradient w.r.t. the logits given softmax output ``p`` and upstream ``grad_p``."""
    return p * (grad_p - (grad_p * p).sum(axis=axis, keepdims=True))


def fd_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    Each entry is perturbed independently: (f(x + h e) - f(x - h e)) / 2h.
    ``f`` receives a fresh float64 array of the same shape as ``x``.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value at entry {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor: float = 1e-6) -> float:
    """Largest entrywise |a - n| / max(|a|, |n|, floor).

    The floor keeps entries that are zero up to round-off (exact cancellations)
    from dominating; it is an absolute scale, so keep losses O(1).
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
