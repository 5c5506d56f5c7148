"""Reference operators and the hooked-layer conformance check.

The references are plain numpy reimplementations of the style-consistency
math. `conformance_check` feeds the same random tensors through each hooked
torch layer and its reference and reports the maximum deviation per layer.
"""

from __future__ import annotations

import numpy as np
import torch

from .layers import CrossViewAttention, GroupNorm3d
from .model import StandInPipeline


def reference_cross_view_attention(
    x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray
) -> np.ndarray:
    """(N, L, D) tokens; keys/values pooled over all views."""
    n, length, _ = x.shape
    q = x @ wq
    k = (x @ wk).reshape(n * length, -1)
    v = (x @ wv).reshape(n * length, -1)
    logits = q @ k.T / np.sqrt(q.shape[-1])
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v


def reference_group_norm_3d(
    x: np.ndarray, groups: int, weight: np.ndarray, bias: np.ndarray, eps: float = 1e-5
) -> np.ndarray:
    """(N, C, H, W); statistics pooled jointly over all views per group."""
    n, c, h, w = x.shape
    g = x.reshape(n, groups, c // groups, h, w)
    mean = g.mean(axis=(0, 2, 3, 4), keepdims=True)
    var = g.var(axis=(0, 2, 3, 4), keepdims=True)
    normed = ((g - mean) / np.sqrt(var + eps)).reshape(n, c, h, w)
    return normed * weight.reshape(1, c, 1, 1) + bias.reshape(1, c, 1, 1)


def _check_attention(layer: CrossViewAttention, rng: np.random.Generator) -> float:
    dim = layer.wq.in_features
    x = rng.standard_normal((3, 10, dim))
    with torch.no_grad():
        got = layer.attention_core(torch.from_numpy(x).float(), style_consistency=True)
    want = reference_cross_view_attention(
        x,
        layer.wq.weight.numpy().T.astype(np.float64),
        layer.wk.weight.numpy().T.astype(np.float64),
        layer.wv.weight.numpy().T.astype(np.float64),
    )
    return float(np.abs(got.numpy() - want).max())


def _check_group_norm(layer: GroupNorm3d, rng: np.random.Generator) -> float:
    channels = layer.weight.shape[0]
    x = rng.standard_normal((3, channels, 6, 6)) * 1.7 + 0.4
    with torch.no_grad():
        got = layer(torch.from_numpy(x).float(), style_consistency=True)
    want = reference_group_norm_3d(
        x,
        layer.groups,
        layer.weight.numpy().astype(np.float64),
        layer.bias.numpy().astype(np.float64),
        layer.eps,
    )
    return float(np.abs(got.numpy() - want).max())


def conformance_check(pipeline: StandInPipeline, seed: int = 0) -> dict[str, float]:
    """Max deviation of every hooked layer from its reference operator."""
    rng = np.random.default_rng(seed)
    report = {}
    for name, layer in pipeline.hooked_layers().items():
        if isinstance(layer, CrossViewAttention):
            report[name] = _check_attention(layer, rng)
        elif isinstance(layer, GroupNorm3d):
            report[name] = _check_group_norm(layer, rng)
        else:  # pragma: no cover - future layer types must be registered
            raise TypeError(f"no reference operator for layer {name}")
    return report
