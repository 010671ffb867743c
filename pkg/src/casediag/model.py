"""Case-level model: visual encoder + fusion (or score pooling) + classifier.

Two classifier heads exist. The knowledge head keeps a frozen matrix of
unit-norm class-text embeddings and scores a case as sigma(dot/s + b) with a
learnable positive scale s (stored as log s) and per-class bias: raw dot
products of unit vectors live in [-1, 1] and would saturate BCE learning
without the calibration, while the per-case class argmax is unaffected by the
positive scale. The plain head is an ordinary linear map.

With fusion mode "learnable" the scans are fused into one case embedding
before classification; the pooling modes classify each scan separately and
pool the per-scan probabilities (max, mean, or a seeded random pick), and no
fusion parameters exist in that configuration.
"""

from __future__ import annotations

import zlib
from dataclasses import asdict

import numpy as np
import torch
from torch import nn

from .corpus import Case, LabelSpace
from .encoders import EncoderConfig, VisualEncoder, encode_batch
from .errors import DataError
from .fusion import FUSION_MODES, FusionConfig, FusionModule, modality_index, truncate_scans
from .preprocess import CanonicalGeometry, normalize_scan

CHECKPOINT_FORMAT_VERSION = 1


class KnowledgeClassifier(nn.Module):
    """Frozen class-text rows as the classifier: logits = (v . t^T)/s + b."""

    def __init__(self, matrix):
        super().__init__()
        self.register_buffer("rows", matrix.detach().clone())
        self.log_scale = nn.Parameter(torch.zeros(()))
        self.bias = nn.Parameter(torch.zeros(matrix.shape[0]))

    @property
    def scale(self):
        return torch.exp(self.log_scale)

    def forward(self, v):
        return (v @ self.rows.transpose(0, 1)) / self.scale + self.bias

    @property
    def n_classes(self):
        return self.rows.shape[0]


class LinearClassifier(nn.Module):
    def __init__(self, embed_dim, n_classes):
        super().__init__()
        self.linear = nn.Linear(embed_dim, n_classes)

    def forward(self, v):
        return self.linear(v)

    @property
    def n_classes(self):
        return self.linear.out_features


class CaseModel(nn.Module):
    """Eq.-style composition: probabilities = sigma(classify(fuse(encode(x))))."""

    def __init__(self, encoder: VisualEncoder, fusion, classifier, fusion_mode="learnable"):
        super().__init__()
        if fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion mode {fusion_mode!r}")
        if (fusion_mode == "learnable") != (fusion is not None):
            raise ValueError("learnable fusion mode requires a fusion module; pooling modes forbid one")
        self.encoder = encoder
        self.fusion = fusion
        self.classifier = classifier
        self.fusion_mode = fusion_mode

    def classify_vectors(self, vectors, modalities, rng=None):
        """Case probabilities (c,) from per-scan embedding vectors (S, d)."""
        if self.fusion_mode == "learnable":
            idx = torch.tensor([modality_index(m) for m in modalities], dtype=torch.long)
            v_fuse = self.fusion(vectors, idx)
            return torch.sigmoid(self.classifier(v_fuse))
        per_scan = torch.sigmoid(self.classifier(vectors))  # (S, c)
        if self.fusion_mode == "max":
            return per_scan.max(dim=0).values
        if self.fusion_mode == "mean":
            return per_scan.mean(dim=0)
        if rng is None:
            rng = np.random.default_rng(0)
        return per_scan[int(rng.integers(per_scan.shape[0]))]

    def forward_tensors(self, tensors, modalities, scan_ids=None, mode="eval", rng=None):
        """Probabilities (c,) for one case given its canonical scan tensors."""
        embeddings = encode_batch(self.encoder, tensors, mode=mode, scan_ids=scan_ids)
        vectors = torch.stack([e.vector for e in embeddings])
        return self.classify_vectors(vectors, modalities, rng=rng)


def item_seed(seed, case_id, epoch=0, salt=0):
    """Derived per-item seed: stable under the run seed, decorrelated across
    cases, epochs, and uses (salt)."""
    return (
        seed * 1_000_003 + zlib.crc32(case_id.encode("utf-8")) + 7919 * epoch + salt
    ) % (2**62)


def case_rng(seed, case_id, epoch=0):
    return np.random.default_rng(item_seed(seed, case_id, epoch))


def forward_case(model: CaseModel, case: Case, geometry=CanonicalGeometry(), mode="eval", seed=0):
    """End-to-end probabilities for one case from raw scans (no augmentation)."""
    rng = case_rng(seed, case.case_id)
    keep = truncate_scans(
        list(range(len(case.scans))),
        model.fusion.cfg.max_scans if model.fusion is not None else 30,
        mode == "train",
        rng,
    )
    scans = [case.scans[i] for i in keep]
    tensors = [normalize_scan(s, geometry) for s in scans]
    with torch.no_grad() if mode == "eval" else torch.enable_grad():
        probs = model.forward_tensors(
            tensors,
            [s.modality for s in scans],
            scan_ids=[s.scan_id for s in scans],
            mode=mode,
            rng=rng,
        )
    return probs


def build_model(encoder_cfg: EncoderConfig, n_classes, fusion_mode="learnable",
                knowledge_matrix=None, fusion_cfg=None):
    encoder = VisualEncoder(encoder_cfg)
    fusion = None
    if fusion_mode == "learnable":
        if fusion_cfg is None:
            fusion_cfg = FusionConfig(embed_dim=encoder_cfg.embed_dim)
        if fusion_cfg.embed_dim != encoder_cfg.embed_dim:
            raise ValueError("fusion embed_dim must match encoder embed_dim")
        fusion = FusionModule(fusion_cfg)
    if knowledge_matrix is not None:
        if knowledge_matrix.shape[0] != n_classes:
            raise DataError(
                f"knowledge matrix has {knowledge_matrix.shape[0]} rows, label space has {n_classes}"
            )
        if knowledge_matrix.shape[1] != encoder_cfg.embed_dim:
            raise DataError("knowledge matrix width must match encoder embed_dim")
        classifier = KnowledgeClassifier(knowledge_matrix)
    else:
        classifier = LinearClassifier(encoder_cfg.embed_dim, n_classes)
    return CaseModel(encoder, fusion, classifier, fusion_mode)


def save_checkpoint(path, model: CaseModel, label_space: LabelSpace, *, encoder_cfg,
                    fusion_cfg=None, train_config=None, epoch=0, optimizer=None,
                    thresholds=None, geometry=None, extra=None):
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "encoder_variant": encoder_cfg.variant,
        "encoder_cfg": asdict(encoder_cfg),
        "fusion_cfg": asdict(fusion_cfg) if fusion_cfg is not None else None,
        "fusion_mode": model.fusion_mode,
        "classifier_kind": (
            "knowledge" if isinstance(model.classifier, KnowledgeClassifier) else "linear"
        ),
        "state_dict": model.state_dict(),
        "label_space": label_space.to_dict(),
        "train_config": train_config,
        "epoch": epoch,
        "optimizer_state": optimizer.state_dict() if optimizer is not None else None,
        "thresholds": thresholds,
        "geometry": asdict(geometry) if geometry is not None else None,
    }
    if extra:
        payload.update(extra)
    torch.save(payload, path)


def load_checkpoint(path):
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"unsupported checkpoint format version {version!r}")
    encoder_cfg = EncoderConfig(**payload["encoder_cfg"])
    label_space = LabelSpace.from_dict(payload["label_space"])
    fusion_cfg = (
        FusionConfig(**payload["fusion_cfg"]) if payload["fusion_cfg"] is not None else None
    )
    n_classes = len(label_space.classes)
    if payload["classifier_kind"] == "knowledge":
        knowledge_matrix = payload["state_dict"]["classifier.rows"]
        model = build_model(
            encoder_cfg, n_classes, payload["fusion_mode"], knowledge_matrix, fusion_cfg
        )
    else:
        model = build_model(encoder_cfg, n_classes, payload["fusion_mode"], None, fusion_cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    geometry = (
        CanonicalGeometry(**payload["geometry"]) if payload.get("geometry") else CanonicalGeometry()
    )
    return {
        "model": model,
        "label_space": label_space,
        "encoder_cfg": encoder_cfg,
        "fusion_cfg": fusion_cfg,
        "geometry": geometry,
        "payload": payload,
    }
