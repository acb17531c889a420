"""Compress a variable number of visual tokens to exactly K outputs.

``slot_compress`` is the learned slot dispatcher: slot k is the softmax
(over tokens) mixture of tokens under the logits ``phi[k] . z_i``.  The other
three are comparison baselines: k-NN entropy sampling, farthest-point
(diversity) sampling and a single-head cross-attention layer.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .numerics import softmax, softmax_backward

DEFAULT_SLOTS = 256
DEFAULT_KNN = 3


def _tokens(tokens) -> np.ndarray:
    z = np.asarray(tokens, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError(f"tokens must be a 2-D (n, d) array, got shape {z.shape}")
    if z.shape[0] == 0:
        raise ValueError("cannot compress an empty token list")
    return z


@dataclass
class SlotDispatcher:
    phi: np.ndarray  # (K, d)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        if self.phi.ndim != 2 or self.phi.shape[0] < 1:
            raise ValueError(f"dispatcher must be (K >= 1, d), got {self.phi.shape}")
        if not np.all(np.isfinite(self.phi)):
            raise ValueError("dispatcher has non-finite entries")

    @classmethod
    def init(cls, k: int, d: int, rng=None, scale: float | None = None) -> "SlotDispatcher":
        rng = np.random.default_rng(rng)
        scale = 1.0 / math.sqrt(d) if scale is None else scale
        return cls(rng.normal(0.0, scale, size=(k, d)))

    @property
    def k(self) -> int:
        return self.phi.shape[0]


@dataclass
class CompressorOutput:
    slots: np.ndarray  # (K, d)
    dispatch_weights: np.ndarray  # (K, n); each row a probability vector


def slot_compress(tokens, disp: SlotDispatcher) -> CompressorOutput:
    z = _tokens(tokens)
    if z.shape[1] != disp.phi.shape[1]:
        raise ValueError(f"token width {z.shape[1]} != dispatcher width {disp.phi.shape[1]}")
    weights = softmax(disp.phi @ z.T, axis=1)
    return CompressorOutput(weights @ z, weights)


def slot_compress_grad(tokens, disp: SlotDispatcher, upstream) -> tuple[np.ndarray, np.ndarray]:
    """Gradients ``(d_phi, d_tokens)`` of ``sum(upstream * slots)``."""
    z = _tokens(tokens)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (disp.k, z.shape[1]):
        raise ValueError(f"upstream shape {g.shape} != slots shape {(disp.k, z.shape[1])}")
    p = slot_compress(z, disp).dispatch_weights
    d_logits = softmax_backward(p, g @ z.T, axis=1)
    d_phi = d_logits @ z
    d_z = p.T @ g + d_logits.T @ disp.phi
    return d_phi, d_z


def knn_distances(tokens, k_nn: int = DEFAULT_KNN) -> np.ndarray:
    """Distance from each token to its ``k_nn``-th nearest other token."""
    z = _tokens(tokens)
    n = z.shape[0]
    if k_nn < 1:
        raise ValueError("k_nn must be >= 1")
    if n < 2:
        return np.zeros(n)
    k_nn = min(k_nn, n - 1)
    dist = cdist(z, z)
    np.fill_diagonal(dist, np.inf)
    return np.partition(dist, k_nn - 1, axis=1)[:, k_nn - 1]


def _top_k_in_order(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -score: ties go to the lower index
    order = np.argsort(-scores, kind="stable")[:k]
    return np.sort(order)


def entropy_sample(tokens, k: int, k_nn: int = DEFAULT_KNN) -> tuple[np.ndarray, np.ndarray]:
    """Keep the ``k`` tokens with the largest k-NN distance (the per-sample
    term of the Kozachenko-Leonenko entropy estimate), in original order."""
    z = _tokens(tokens)
    if z.shape[0] < k:
        raise ValueError(f"cannot select {k} tokens from {z.shape[0]}")
    if z.shape[0] == k:
        idx = np.arange(k)
    else:
        idx = _top_k_in_order(knn_distances(z, k_nn), k)
    return idx, z[idx]


def farthest_point_order(tokens, k: int, seed=None) -> np.ndarray:
    """Pick order of the diversity sampler.

    Without a seed: start from the token farthest from the centroid, then add
    the token with the largest distance to the chosen set.  With a seed the
    picks follow k-means++ seeding (first uniform, then proportional to squared
    distance).
    """
    z = _tokens(tokens)
    n = z.shape[0]
    if n < k:
        raise ValueError(f"cannot select {k} tokens from {n}")
    rng = None if seed is None else np.random.default_rng(seed)
    if rng is None:
        first = int(np.argmax(np.linalg.norm(z - z.mean(0), axis=1)))
    else:
        first = int(rng.integers(n))
    picks = [first]
    min_d = np.linalg.norm(z - z[first], axis=1)
    min_d[first] = -np.inf
    for _ in range(k - 1):
        if rng is None:
            nxt = int(np.argmax(min_d))
        else:
            w = np.where(np.isfinite(min_d), min_d, 0.0) ** 2
            if w.sum() > 0:
                nxt = int(rng.choice(n, p=w / w.sum()))
            else:
                # all remaining tokens duplicate a pick
                nxt = int(rng.choice(np.flatnonzero(np.isfinite(min_d))))
        picks.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(z - z[nxt], axis=1))
        min_d[picks] = -np.inf
    return np.asarray(picks)


def diverse_sample(tokens, k: int, seed=None) -> tuple[np.ndarray, np.ndarray]:
    z = _tokens(tokens)
    idx = np.sort(farthest_point_order(z, k, seed))
    return idx, z[idx]


@dataclass
class CrossAttention:
    queries: np.ndarray  # (K, d)
    w_key: np.ndarray  # (d, d)
    w_value: np.ndarray  # (d, d)

    @classmethod
    def init(cls, k: int, d: int, rng=None) -> "CrossAttention":
        rng = np.random.default_rng(rng)
        s = 1.0 / math.sqrt(d)
        return cls(rng.normal(0, s, (k, d)), rng.normal(0, s, (d, d)), rng.normal(0, s, (d, d)))

    @property
    def k(self) -> int:
        return self.queries.shape[0]


def _attention_parts(z: np.ndarray, attn: CrossAttention):
    d = z.shape[1]
    if attn.queries.shape[1] != d or attn.w_key.shape != (d, d) or attn.w_value.shape != (d, d):
        raise ValueError(
            f"attention parameters {attn.queries.shape}/{attn.w_key.shape}/{attn.w_value.shape} "
            f"do not match token width {d}"
        )
    keys = z @ attn.w_key
    values = z @ attn.w_value
    weights = softmax(attn.queries @ keys.T / math.sqrt(d), axis=1)
    return keys, values, weights


def cross_attention_compress(tokens, attn: CrossAttention) -> CompressorOutput:
    """Single-head attention from K learned queries over the tokens, no output projection."""
    z = _tokens(tokens)
    _, values, weights = _attention_parts(z, attn)
    return CompressorOutput(weights @ values, weights)


def cross_attention_grad(tokens, attn: CrossAttention, upstream) -> dict:
    """Gradients of ``sum(upstream * output)`` w.r.t. every input."""
    z = _tokens(tokens)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape != (attn.k, z.shape[1]):
        raise ValueError(f"upstream shape {g.shape} != output shape {(attn.k, z.shape[1])}")
    scale = 1.0 / math.sqrt(z.shape[1])
    keys, values, p = _attention_parts(z, attn)
    d_values = p.T @ g
    d_logits = softmax_backward(p, g @ values.T, axis=1) * scale
    d_queries = d_logits @ keys
    d_keys = d_logits.T @ attn.queries
    return {
        "queries": d_queries,
        "w_key": z.T @ d_keys,
        "w_value": z.T @ d_values,
        "tokens": d_keys @ attn.w_key.T + d_values @ attn.w_value.T,
    }


METHODS = ("slot", "entropy", "diverse", "xattn")


def compress(method: str, tokens, k: int, params=None, k_nn: int = DEFAULT_KNN, seed=None) -> np.ndarray:
    """Uniform entry point: ``(n, d)`` tokens to ``(k, d)`` outputs."""
    if method == "slot":
        return slot_compress(tokens, params).slots
    if method == "entropy":
        return entropy_sample(tokens, k, k_nn)[1]
    if method == "diverse":
        return diverse_sample(tokens, k, seed)[1]
    if method == "xattn":
        return cross_attention_compress(tokens, params).slots
    raise ValueError(f"unknown compression method {method!r}; expected one of {METHODS}")


def in_convex_hull_box(outputs, tokens, atol: float = 1e-9) -> np.ndarray:
    """Per-output check that every coordinate lies within the tokens' range."""
    out = np.asarray(outputs)
    z = np.asarray(tokens)
    lo, hi = z.min(0) - atol, z.max(0) + atol
    return np.all((out >= lo) & (out <= hi), axis=1)
