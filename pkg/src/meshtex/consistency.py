"""Reference implementations of the multi-view style-coupling operators.

These are the ground truth the backend's live hooks are checked against:
self-attention with keys/values concatenated across all views, and group
normalization whose statistics pool every pixel of every view. Both are
training-free; duplicating a view must leave per-view outputs unchanged.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def cross_view_attention(
    batch: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray
) -> np.ndarray:
    """Single-head attention where each view queries the token pool of all
    views.

    batch: (N, L, D) features. wq/wk/wv: (D, D_head) projections. Queries
    stay per-view; keys and values come from the concatenation of all N
    views' tokens.
    """
    if batch.ndim != 3:
        raise ShapeError("batch must be (N, L, D)")
    n, l, d = batch.shape
    if wq.shape[0] != d or wk.shape[0] != d or wv.shape[0] != d:
        raise ShapeError("projection input dim does not match feature dim")
    if wk.shape[1] != wq.shape[1]:
        raise ShapeError("query/key output dims differ")
    pooled = batch.reshape(n * l, d)
    k = pooled @ wk  # (N*L, Dh)
    v = pooled @ wv
    q = batch @ wq  # (N, L, Dh)
    scale = 1.0 / np.sqrt(q.shape[-1])
    attn = _softmax(np.einsum("nld,md->nlm", q, k) * scale, axis=-1)
    return np.einsum("nlm,md->nld", attn, v)


def attention_weights(
    batch: np.ndarray, wq: np.ndarray, wk: np.ndarray
) -> np.ndarray:
    """The (N, L, N*L) attention matrix used by cross_view_attention."""
    n, l, d = batch.shape
    k = batch.reshape(n * l, d) @ wk
    q = batch @ wq
    scale = 1.0 / np.sqrt(q.shape[-1])
    return _softmax(np.einsum("nld,md->nlm", q, k) * scale, axis=-1)


def group_norm_3d(
    batch: np.ndarray,
    groups: int,
    eps: float = 1e-5,
    scale: np.ndarray | None = None,
    shift: np.ndarray | None = None,
) -> np.ndarray:
    """Group normalization with statistics pooled across all views.

    batch: (N, C, H, W). Mean/variance are computed per channel group over
    every pixel of every view jointly, then per-channel scale/shift applies.
    """
    if batch.ndim != 4:
        raise ShapeError("batch must be (N, C, H, W)")
    n, c, h, w = batch.shape
    if c % groups:
        raise ShapeError(f"channels {c} not divisible by {groups} groups")
    g = batch.reshape(n, groups, c // groups, h, w)
    mean = g.mean(axis=(0, 2, 3, 4), keepdims=True)
    var = g.var(axis=(0, 2, 3, 4), keepdims=True)
    out = ((g - mean) / np.sqrt(var + eps)).reshape(n, c, h, w)
    if scale is not None:
        out = out * scale.reshape(1, c, 1, 1)
    if shift is not None:
        out = out + shift.reshape(1, c, 1, 1)
    return out
