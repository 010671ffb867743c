"""Case-level aggregation of per-scan embeddings.

The learnable path adds a modality embedding to each scan embedding, prepends
a CLS token, and runs a small transformer encoder; the CLS output is the case
embedding. No positional encoding is applied across scans (a case's scans
have no canonical order), which makes the fusion permutation invariant.

The parameter-free baselines operate on per-scan score vectors instead:
element-wise max, element-wise mean, or a seeded random pick.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .corpus import MODALITIES
from .layers import TransformerStack, check_finite

FUSION_MODES = ("learnable", "max", "mean", "random")


@dataclass
class FusionConfig:
    embed_dim: int = 256
    n_layers: int = 2
    n_heads: int = 4
    max_scans: int = 30


class FusionModule(nn.Module):
    """Transformer fusion: v_fuse = CLS output over (v_i + p_modality_i)."""

    def __init__(self, cfg: FusionConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.modality_table = nn.Parameter(0.02 * torch.randn(len(MODALITIES), d))
        self.cls = nn.Parameter(0.02 * torch.randn(1, 1, d))
        self.trunk = TransformerStack(d, cfg.n_layers, cfg.n_heads)

    def forward(self, vectors, modality_indices):
        """vectors: (S, d); modality_indices: (S,) int tensor. Returns (d,)."""
        if vectors.ndim != 2 or vectors.shape[0] == 0:
            raise ValueError("fuse requires a non-empty (S, d) embedding matrix")
        if vectors.shape[1] != self.cfg.embed_dim:
            raise ValueError(
                f"embedding dim {vectors.shape[1]} != configured {self.cfg.embed_dim}"
            )
        if vectors.shape[0] > self.cfg.max_scans:
            raise ValueError(f"case has {vectors.shape[0]} scans, cap is {self.cfg.max_scans}")
        tokens = vectors + self.modality_table[modality_indices]
        seq = torch.cat([self.cls.to(tokens.dtype), tokens.unsqueeze(0)], dim=1)
        out = self.trunk(seq)
        check_finite(out, "fusion transformer")
        return out[0, 0]


def modality_index(modality):
    return MODALITIES.index(modality)


def truncate_scans(indices, max_scans, training, rng):
    """Enforce the per-case scan cap: seeded subsample while training,
    deterministic head truncation during eval."""
    if len(indices) <= max_scans:
        return list(indices)
    if training:
        picked = rng.choice(len(indices), size=max_scans, replace=False)
        return [indices[i] for i in sorted(picked)]
    return list(indices[:max_scans])


def baseline_fuse(per_scan_scores, mode, seed=0):
    """Parameter-free case pooling over per-scan score vectors."""
    if not per_scan_scores:
        raise ValueError("baseline_fuse requires a non-empty score list")
    stacked = np.stack([np.asarray(s, dtype=np.float64) for s in per_scan_scores])
    if mode == "max":
        return stacked.max(axis=0)
    if mode == "mean":
        return stacked.mean(axis=0)
    if mode == "random":
        rng = np.random.default_rng(seed)
        return stacked[int(rng.integers(stacked.shape[0]))]
    raise ValueError(f"unknown baseline fusion mode {mode!r}")
