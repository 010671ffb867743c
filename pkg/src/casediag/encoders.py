"""Unified 2D/3D visual encoders: three variants mapping a canonical scan
tensor to an embedding of fixed dimension d.

Every variant pairs format-specific normalization paths (one for 2D, one for
3D) with a shared encoding trunk, so both input formats land in the same
embedding space:
  resnet          3D conv stack -> depth mean pool -> shared 2D residual trunk
  vit             patches/cubes -> separate MLP projections + positional
                  tables -> shared transformer -> CLS
  resnet_vit_mix  every depth slice through one shared 2D ResNet -> slice
                  tokens -> transformer + attention-pool readout
The mixing variant's readout depends only on the token set, so a volume of
identical slices embeds like the single slice (slice-position encoding is an
opt-in flag that trades this away).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import UsageError
from .layers import (
    AttentionPoolReadout,
    ResBlock2d,
    ResBlock3d,
    TransformerStack,
    check_finite,
)
from .preprocess import CanonicalScanTensor

VARIANTS = ("resnet", "vit", "resnet_vit_mix")


@dataclass
class EncoderConfig:
    variant: str = "resnet_vit_mix"
    embed_dim: int = 256
    height: int = 256
    width: int = 256
    depth: int = 32
    base_channels: int = 32
    norm_stages: int = 1
    shared_stages: int = 2
    blocks_per_stage: int = 2
    patch_size: int = 32
    cube_size: tuple = (32, 32, 8)
    mlp_layers: int = 2
    transformer_layers: int = 2
    transformer_heads: int = 4
    slice_position_encoding: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise UsageError(f"unknown encoder variant {self.variant!r}")
        if self.embed_dim % 2 != 0:
            raise UsageError("embed_dim must be even")
        if self.variant == "vit":
            if self.height % self.patch_size or self.width % self.patch_size:
                raise UsageError("patch_size must divide height and width")
            ch, cw, cd = self.cube_size
            if self.height % ch or self.width % cw or self.depth % cd:
                raise UsageError("cube_size must divide (height, width, depth)")


@dataclass
class VisualEmbedding:
    vector: torch.Tensor
    scan_id: str
    modality: str


def _stage(block, cin, cout, n_blocks, stride):
    blocks = [block(cin, cout, stride)]
    blocks += [block(cout, cout) for _ in range(n_blocks - 1)]
    return nn.Sequential(*blocks)


class _ResNetEncoder(nn.Module):
    """Separate 2D/3D normalization stacks feeding a shared 2D residual trunk."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_channels
        self.stem2d = nn.Sequential(nn.Conv2d(1, c, 3, padding=1, bias=False), nn.ReLU())
        self.stem3d = nn.Sequential(nn.Conv3d(1, c, 3, padding=1, bias=False), nn.ReLU())
        norm2d, norm3d = [], []
        for _ in range(cfg.norm_stages):
            norm2d.append(_stage(ResBlock2d, c, 2 * c, cfg.blocks_per_stage, 2))
            norm3d.append(_stage(ResBlock3d, c, 2 * c, cfg.blocks_per_stage, 2))
            c *= 2
        self.norm2d = nn.Sequential(*norm2d)
        self.norm3d = nn.Sequential(*norm3d)
        shared = []
        for _ in range(cfg.shared_stages):
            shared.append(_stage(ResBlock2d, c, 2 * c, cfg.blocks_per_stage, 2))
            c *= 2
        self.shared = nn.Sequential(*shared)
        self.head = nn.Linear(c, cfg.embed_dim)

    def forward(self, x, is_3d):
        if is_3d:
            # (B, 1, D, H, W) -> depth mean pool after the 3D stack
            h = self.norm3d(self.stem3d(x))
            h = h.mean(dim=2)
        else:
            h = self.norm2d(self.stem2d(x))
        check_finite(h, "resnet normalization stack")
        h = self.shared(h)
        check_finite(h, "resnet shared trunk")
        return self.head(h.mean(dim=(2, 3)))


class _ViTEncoder(nn.Module):
    """Separate patch/cube MLP projections and positional tables; shared
    transformer over the token sequence with a learnable CLS readout."""

    def __init__(self, cfg):
        super().__init__()
        d = cfg.embed_dim
        p = cfg.patch_size
        ch, cw, cd = cfg.cube_size
        self.patch_hw = (cfg.height // p, cfg.width // p)
        self.cube_hwd = (cfg.height // ch, cfg.width // cw, cfg.depth // cd)
        n_patches = self.patch_hw[0] * self.patch_hw[1]
        n_cubes = self.cube_hwd[0] * self.cube_hwd[1] * self.cube_hwd[2]
        self.proj2d = self._mlp(p * p, d, cfg.mlp_layers)
        self.proj3d = self._mlp(ch * cw * cd, d, cfg.mlp_layers)
        self.pos2d = nn.Parameter(0.02 * torch.randn(1, n_patches, d))
        self.pos3d = nn.Parameter(0.02 * torch.randn(1, n_cubes, d))
        self.cls = nn.Parameter(0.02 * torch.randn(1, 1, d))
        self.trunk = TransformerStack(d, cfg.transformer_layers, cfg.transformer_heads)
        self.cfg = cfg

    @staticmethod
    def _mlp(d_in, d_out, n_layers):
        layers = [nn.Linear(d_in, d_out)]
        for _ in range(n_layers - 1):
            layers += [nn.GELU(), nn.Linear(d_out, d_out)]
        return nn.Sequential(*layers)

    def forward(self, x, is_3d):
        if is_3d:
            # (B, 1, D, H, W) -> non-overlapping cubes, depth-major raster order
            ch, cw, cd = self.cfg.cube_size
            b = x.shape[0]
            t = x.squeeze(1).permute(0, 2, 3, 1)  # (B, H, W, D)
            nh, nw, nd = self.cube_hwd
            t = t.reshape(b, nh, ch, nw, cw, nd, cd)
            t = t.permute(0, 1, 3, 5, 2, 4, 6).reshape(b, nh * nw * nd, ch * cw * cd)
            tokens = self.proj3d(t) + self.pos3d
        else:
            p = self.cfg.patch_size
            b = x.shape[0]
            nh, nw = self.patch_hw
            t = x.squeeze(1).reshape(b, nh, p, nw, p)
            t = t.permute(0, 1, 3, 2, 4).reshape(b, nh * nw, p * p)
            tokens = self.proj2d(t) + self.pos2d
        check_finite(tokens, "vit projection")
        seq = torch.cat([self.cls.expand(tokens.shape[0], -1, -1), tokens], dim=1)
        out = self.trunk(seq)
        check_finite(out, "vit shared transformer")
        return out[:, 0]


class _MixEncoder(nn.Module):
    """One shared 2D ResNet per slice, then transformer aggregation of the
    pooled slice tokens with an attention-pool readout."""

    def __init__(self, cfg):
        super().__init__()
        c = cfg.base_channels
        stages = [nn.Conv2d(1, c, 3, padding=1, bias=False), nn.ReLU()]
        for _ in range(cfg.norm_stages + cfg.shared_stages):
            stages.append(_stage(ResBlock2d, c, 2 * c, cfg.blocks_per_stage, 2))
            c *= 2
        self.slice_net = nn.Sequential(*stages)
        self.to_token = nn.Linear(c, cfg.embed_dim)
        if cfg.slice_position_encoding:
            self.slice_pos = nn.Parameter(0.02 * torch.randn(1, cfg.depth, cfg.embed_dim))
        else:
            self.slice_pos = None
        self.trunk = TransformerStack(
            cfg.embed_dim, cfg.transformer_layers, cfg.transformer_heads
        )
        self.readout = AttentionPoolReadout(cfg.embed_dim, cfg.transformer_heads)

    def forward(self, x, is_3d):
        if is_3d:
            b, _, d_depth, h, w = x.shape
            slices = x.permute(0, 2, 1, 3, 4).reshape(b * d_depth, 1, h, w)
        else:
            b, d_depth = x.shape[0], 1
            slices = x
        feats = self.slice_net(slices)
        check_finite(feats, "mixing slice network")
        tokens = self.to_token(feats.mean(dim=(2, 3))).reshape(b, d_depth, -1)
        if self.slice_pos is not None:
            tokens = tokens + self.slice_pos[:, :d_depth]
        out = self.trunk(tokens)
        check_finite(out, "mixing aggregation transformer")
        return self.readout(out)


class VisualEncoder(nn.Module):
    """Dispatching wrapper: accepts (B, 1, H, W) or (B, 1, D, H, W) input."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        impl = {"resnet": _ResNetEncoder, "vit": _ViTEncoder, "resnet_vit_mix": _MixEncoder}
        self.impl = impl[cfg.variant](cfg)

    def forward(self, x):
        if x.ndim not in (4, 5):
            raise ValueError(f"expected 4-d or 5-d input, got shape {tuple(x.shape)}")
        out = self.impl(x, is_3d=(x.ndim == 5))
        return check_finite(out, "encoder output")


def _to_input(tensor: CanonicalScanTensor, dtype):
    v = torch.as_tensor(np.ascontiguousarray(tensor.values), dtype=dtype)
    if tensor.values.shape[2] == 1:
        return v[:, :, 0]  # (H, W)
    return v.permute(2, 0, 1)  # (D, H, W)


def encode_batch(encoder: VisualEncoder, tensors, mode="eval", scan_ids=None):
    """Encode a list of canonical tensors; mixed 2D/3D input is grouped by
    format internally and results keep the input order."""
    if not tensors:
        return []
    if scan_ids is None:
        scan_ids = [""] * len(tensors)
    encoder.train(mode == "train")
    dtype = next(encoder.parameters()).dtype
    groups = {}
    for i, t in enumerate(tensors):
        groups.setdefault(t.values.shape[2] == 1, []).append(i)
    results = [None] * len(tensors)
    for idxs in groups.values():
        batch = torch.stack([_to_input(tensors[i], dtype) for i in idxs]).unsqueeze(1)
        out = encoder(batch)
        for row, i in enumerate(idxs):
            results[i] = VisualEmbedding(
                vector=out[row], scan_id=scan_ids[i], modality=tensors[i].modality
            )
    return results


def encode(encoder: VisualEncoder, tensor: CanonicalScanTensor, mode="eval", scan_id=""):
    return encode_batch(encoder, [tensor], mode, [scan_id])[0]
