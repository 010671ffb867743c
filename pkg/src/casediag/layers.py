"""Shared network building blocks for the encoders and the fusion module.

Normalization is GroupNorm throughout: batch statistics would make results
depend on batch composition, and the contract is that batching never changes
an individual output. Transformer blocks are pre-norm with a 4x feed-forward
and no dropout, so train and eval modes are both deterministic.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import NumericError


def check_finite(x, layer_name):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite activations in {layer_name}")
    return x


def _group_norm(channels):
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock2d(nn.Module):
    """3x3-3x3 residual block; stride on the first conv, 1x1 shortcut on change."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _group_norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.shortcut(x))


class ResBlock3d(nn.Module):
    """3D residual block; strides apply to height/width only, depth is kept."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        s = (1, stride, stride)
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=s, padding=1, bias=False)
        self.norm1 = _group_norm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _group_norm(cout)
        if stride != 1 or cin != cout:
            self.shortcut = nn.Conv3d(cin, cout, 1, stride=s, bias=False)
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        h = self.act(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return self.act(h + self.shortcut(x))


def _split_heads(x, n_heads):
    b, t, d = x.shape
    return x.view(b, t, n_heads, d // n_heads).transpose(1, 2)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.transpose(1, 2).reshape(b, t, h * dh)


def _attention(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[-1])
    logits = torch.matmul(q, k.transpose(-2, -1)) * scale
    return torch.matmul(torch.softmax(logits, dim=-1), v)


class SelfAttentionBlock(nn.Module):
    """Pre-norm multi-head self-attention + MLP residual block."""

    def __init__(self, d, n_heads, mlp_ratio=4.0):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"embed dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        hidden = int(d * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(d, hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, x):
        h = self.norm1(x)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        attn = _attention(
            _split_heads(q, self.n_heads),
            _split_heads(k, self.n_heads),
            _split_heads(v, self.n_heads),
        )
        x = x + self.proj(_merge_heads(attn))
        return x + self.mlp(self.norm2(x))


class TransformerStack(nn.Module):
    def __init__(self, d, n_layers, n_heads, mlp_ratio=4.0):
        super().__init__()
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(d, n_heads, mlp_ratio) for _ in range(n_layers)
        )
        self.final_norm = nn.LayerNorm(d)

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.final_norm(x)


class AttentionPoolReadout(nn.Module):
    """Learnable-query cross-attention over a token set.

    The readout depends only on the set of token values: duplicating a token
    set of identical tokens leaves the output unchanged.
    """

    def __init__(self, d, n_heads):
        super().__init__()
        if d % n_heads != 0:
            raise ValueError(f"embed dim {d} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.query = nn.Parameter(torch.zeros(1, 1, d))
        self.key = nn.Linear(d, d)
        self.value = nn.Linear(d, d)
        self.out = nn.Linear(d, d)

    def forward(self, tokens):
        b = tokens.shape[0]
        q = _split_heads(self.query.expand(b, 1, -1), self.n_heads)
        k = _split_heads(self.key(tokens), self.n_heads)
        v = _split_heads(self.value(tokens), self.n_heads)
        pooled = _merge_heads(_attention(q, k, v)).squeeze(1)
        return self.out(pooled)
