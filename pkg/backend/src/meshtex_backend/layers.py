"""Hookable layers: self-attention that widens to cross-view attention and
a group norm that pools statistics across views.

Both layers treat the leading tensor dimension as the view axis. With the
style flag off (or a single view) they are the plain single-image operators,
which is what the conformance suite checks.
"""

from __future__ import annotations

import math

import torch
from torch import nn


class CrossViewAttention(nn.Module):
    """Single-head attention over token sequences, one sequence per view.

    With style consistency on, keys and values are concatenated across all
    views and shared by every query, so matching content in different views
    attends to the same evidence.
    """

    def __init__(self, dim: int, head_dim: int | None = None):
        super().__init__()
        head_dim = head_dim or dim
        self.wq = nn.Linear(dim, head_dim, bias=False)
        self.wk = nn.Linear(dim, head_dim, bias=False)
        self.wv = nn.Linear(dim, head_dim, bias=False)
        self.wo = nn.Linear(head_dim, dim, bias=False)

    def forward(self, x: torch.Tensor, style_consistency: bool = False) -> torch.Tensor:
        # x: (N, L, D)
        n, length, _ = x.shape
        q = self.wq(x)
        k = self.wk(x)
        v = self.wv(x)
        if style_consistency:
            k = k.reshape(1, n * length, -1).expand(n, -1, -1)
            v = v.reshape(1, n * length, -1).expand(n, -1, -1)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        return self.wo(attn @ v)

    def attention_core(
        self, x: torch.Tensor, style_consistency: bool = False
    ) -> torch.Tensor:
        """The pre-projection attention output, for conformance checks."""
        n, length, _ = x.shape
        q = self.wq(x)
        k = self.wk(x)
        v = self.wv(x)
        if style_consistency:
            k = k.reshape(1, n * length, -1).expand(n, -1, -1)
            v = v.reshape(1, n * length, -1).expand(n, -1, -1)
        scale = 1.0 / math.sqrt(q.shape[-1])
        attn = torch.softmax(q @ k.transpose(-2, -1) * scale, dim=-1)
        return attn @ v


class GroupNorm3d(nn.Module):
    """Group norm whose statistics optionally pool over the view axis."""

    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        if channels % groups:
            raise ValueError("channels must divide evenly into groups")
        self.groups = groups
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x: torch.Tensor, style_consistency: bool = False) -> torch.Tensor:
        # x: (N, C, H, W)
        n, c, h, w = x.shape
        g = x.reshape(n, self.groups, c // self.groups, h, w)
        if style_consistency:
            dims = (0, 2, 3, 4)
            mean = g.mean(dim=dims, keepdim=True)
            var = g.var(dim=dims, unbiased=False, keepdim=True)
        else:
            dims = (2, 3, 4)
            mean = g.mean(dim=dims, keepdim=True)
            var = g.var(dim=dims, unbiased=False, keepdim=True)
        normed = ((g - mean) / torch.sqrt(var + self.eps)).reshape(n, c, h, w)
        return normed * self.weight.view(1, c, 1, 1) + self.bias.view(1, c, 1, 1)
