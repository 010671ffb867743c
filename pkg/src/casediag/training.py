"""End-to-end case-level training, threshold selection, fine-tuning, and
zero-shot label-space transfer.

The optimizer is AdamW under a linear-warmup-then-cosine learning-rate curve.
Data order and every stochastic choice (shuffling, augmentation, key-slice
substitution, random-pick pooling) derive from the run seed plus the case id
and epoch, so a fixed seed reproduces the checkpoint exactly with
single-worker loading.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import LabelSpace, build_label_space, subsample_cases
from .encoders import EncoderConfig
from .errors import DataError, NumericError, UsageError
from .fusion import FUSION_MODES, FusionConfig
from .knowledge import KnowledgeEmbedding
from .metrics import auc as _auc
from .model import (
    CaseModel,
    build_model,
    case_rng,
    forward_case,
    item_seed,
    save_checkpoint,
)
from .preprocess import (
    AugmentConfig,
    CanonicalGeometry,
    augment,
    key_slice_substitute,
    normalize_scan,
)

DATA_FRACTIONS = (0.01, 0.1, 0.3, 1.0)


@dataclass
class TrainConfig:
    epochs: int = 100
    warmup_epochs: int = 5
    peak_lr: float = 1e-5
    weight_decay: float = 0.01
    batch_size: int = 8
    augment: bool = True
    key_slice_prob: float = 0.3
    knowledge_enhancement: bool = True
    fusion_mode: str = "learnable"

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise UsageError("peak learning rate must be positive")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise UsageError("warmup must be shorter than the run")
        if self.fusion_mode not in FUSION_MODES:
            raise UsageError(f"unknown fusion mode {self.fusion_mode!r}")


def lr_at(epoch_frac, config: TrainConfig):
    """Learning rate at a fractional epoch: linear 0 -> peak over the warmup,
    then cosine decay to 0 at the final epoch."""
    e = float(epoch_frac)
    if config.warmup_epochs > 0 and e < config.warmup_epochs:
        return config.peak_lr * e / config.warmup_epochs
    span = config.epochs - config.warmup_epochs
    t = min(max((e - config.warmup_epochs) / span, 0.0), 1.0)
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * t))


def bce_loss(p, y):
    """Multi-label binary cross entropy with 1e-7 clamping, never NaN."""
    p = torch.as_tensor(p)
    y = torch.as_tensor(y, dtype=p.dtype)
    eps = 1e-7
    pc = torch.clamp(p, eps, 1.0 - eps)
    return -(y * torch.log(pc) + (1.0 - y) * torch.log(1.0 - pc)).sum()


class _TensorCache:
    """Normalized canonical tensors per scan, keyed by (scan_id, substituted)."""

    def __init__(self, geometry):
        self.geometry = geometry
        self._store = {}

    def get(self, scan, substituted):
        key = (scan.scan_id, substituted)
        if key not in self._store:
            self._store[key] = normalize_scan(scan, self.geometry)
        return self._store[key]


def _case_inputs(case, cache, *, training, cfg, seed, epoch):
    """Preprocess one case for the model: substitution + normalization (+
    augmentation while training)."""
    work = case
    if training and cfg.key_slice_prob > 0:
        work = key_slice_substitute(
            case, cfg.key_slice_prob, item_seed(seed, case.case_id, epoch, salt=1)
        )
    tensors = []
    for i, scan in enumerate(work.scans):
        substituted = scan.dims != case.scans[i].dims
        t = cache.get(scan, substituted)
        if training and cfg.augment:
            t = augment(t, item_seed(seed, case.case_id, epoch, salt=100 + i))
        tensors.append(t)
    return work, tensors


def train_model(model: CaseModel, train_cases, label_space, cfg: TrainConfig, *,
                seed=0, geometry=CanonicalGeometry(), val_cases=None, out_dir=None,
                save_extra=None, encoder_cfg=None, fusion_cfg=None):
    """Core optimization loop shared by train() and finetune().

    Returns {"model", "history", "thresholds": None}; writes one checkpoint
    per epoch when out_dir is given.
    """
    if not train_cases:
        raise DataError("training split is empty")
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.peak_lr, weight_decay=cfg.weight_decay)
    cache = _TensorCache(geometry)
    labels = {c.case_id: label_space.label_vector(c) for c in train_cases}
    order_base = sorted(train_cases, key=lambda c: c.case_id)
    n = len(order_base)
    n_batches = max(1, math.ceil(n / cfg.batch_size))
    history = []
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    for epoch in range(cfg.epochs):
        shuffle_rng = np.random.default_rng(item_seed(seed, "epoch-order", epoch))
        order = [order_base[i] for i in shuffle_rng.permutation(n)]
        model.train()
        epoch_loss = 0.0
        for b in range(n_batches):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            if not batch:
                continue
            lr = lr_at(epoch + b / n_batches, cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            batch_loss = 0.0
            for case in batch:
                work, tensors = _case_inputs(
                    case, cache, training=True, cfg=cfg, seed=seed, epoch=epoch
                )
                rng = case_rng(seed, case.case_id, epoch)
                probs = model.forward_tensors(
                    tensors,
                    [s.modality for s in work.scans],
                    scan_ids=[s.scan_id for s in work.scans],
                    mode="train",
                    rng=rng,
                )
                loss = bce_loss(probs, labels[case.case_id])
                if not torch.isfinite(loss):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch} batch {b} "
                        f"(cases {[c.case_id for c in batch]})"
                    )
                batch_loss = batch_loss + loss
            batch_loss = batch_loss / len(batch)
            batch_loss.backward()
            opt.step()
            epoch_loss += float(batch_loss.detach())
        entry = {"epoch": epoch, "train_loss": epoch_loss / n_batches, "lr": lr_at(epoch, cfg)}
        if val_cases:
            scores, ys, _ = predict_corpus(model, val_cases, label_space, geometry, seed=seed)
            vals = [
                _auc(scores[:, j], ys[:, j])
                for j in range(scores.shape[1])
            ]
            vals = [v for v in vals if not math.isnan(v)]
            entry["val_macro_auc"] = float(np.mean(vals)) if vals else math.nan
        history.append(entry)
        if out_path is not None:
            save_checkpoint(
                out_path / f"checkpoint_ep{epoch:03d}.pt",
                model,
                label_space,
                encoder_cfg=encoder_cfg,
                fusion_cfg=fusion_cfg,
                train_config=vars(cfg).copy(),
                epoch=epoch,
                optimizer=opt,
                geometry=geometry,
                extra=save_extra,
            )
    model.eval()
    return {"model": model, "history": history, "optimizer": opt}


def train(corpus, splits, cfg: TrainConfig, encoder_cfg: EncoderConfig, *, seed=0,
          geometry=CanonicalGeometry(), level="disorder", knowledge=None,
          fusion_cfg=None, out_dir=None, label_space=None):
    """Train a case model from scratch on a corpus under a split assignment.

    knowledge: optional KnowledgeEmbedding whose frozen rows become the
    classifier (knowledge enhancement); otherwise a learnable linear head.
    """
    if label_space is None:
        label_space = build_label_space(corpus, level, splits)
    torch.manual_seed(seed)
    matrix = None
    if cfg.knowledge_enhancement and knowledge is not None:
        matrix = _aligned_rows(knowledge, label_space)
    if fusion_cfg is None and cfg.fusion_mode == "learnable":
        fusion_cfg = FusionConfig(embed_dim=encoder_cfg.embed_dim)
    model = build_model(
        encoder_cfg,
        len(label_space.classes),
        fusion_mode=cfg.fusion_mode,
        knowledge_matrix=matrix,
        fusion_cfg=fusion_cfg,
    )
    train_cases = splits.cases_in(corpus, "train")
    val_cases = splits.cases_in(corpus, "val")
    result = train_model(
        model, train_cases, label_space, cfg,
        seed=seed, geometry=geometry, val_cases=val_cases, out_dir=out_dir,
        encoder_cfg=encoder_cfg, fusion_cfg=fusion_cfg,
    )
    result["label_space"] = label_space
    return result


def _aligned_rows(knowledge: KnowledgeEmbedding, label_space: LabelSpace):
    index = {c: i for i, c in enumerate(knowledge.classes)}
    missing = [c for c in label_space.classes if c not in index]
    if missing:
        raise DataError(f"knowledge embedding lacks rows for classes {missing}")
    rows = torch.stack([knowledge.matrix[index[c]] for c in label_space.classes])
    return rows


def predict_corpus(model: CaseModel, cases, label_space, geometry, seed=0):
    """Score every case: returns (scores (n, c), labels (n, c), case_ids)."""
    model.eval()
    scores = np.zeros((len(cases), len(label_space.classes)))
    ys = np.zeros_like(scores)
    ids = []
    for i, case in enumerate(cases):
        probs = forward_case(model, case, geometry, mode="eval", seed=seed)
        scores[i] = probs.detach().cpu().numpy()
        ys[i] = label_space.label_vector(case)
        ids.append(case.case_id)
    return scores, ys, ids


def select_threshold(val_scores, val_labels):
    """Per-class thresholds maximizing F1 over the observed score values.

    val_scores/val_labels: (n, c) arrays. Prediction convention is
    score >= threshold; F1 ties break toward the larger threshold. A class
    with single-valued validation labels falls back to 0.5 with a warning.
    """
    s = np.asarray(val_scores, dtype=np.float64)
    y = np.asarray(val_labels, dtype=np.int64)
    n, c = s.shape
    thresholds = np.full(c, 0.5)
    for j in range(c):
        col, lab = s[:, j], y[:, j]
        n_pos = int(lab.sum())
        if n_pos == 0 or n_pos == n:
            warnings.warn(f"class column {j}: single-valued validation labels; threshold 0.5")
            continue
        # descending unique candidates; cumulative counts give F1 at >= t
        order = np.argsort(-col, kind="mergesort")
        sc, yc = col[order], lab[order]
        tps = np.cumsum(yc)
        fps = np.cumsum(1 - yc)
        last = np.empty(n, dtype=bool)
        last[-1] = True
        last[:-1] = sc[1:] != sc[:-1]
        tp, fp, cand = tps[last], fps[last], sc[last]
        fn = n_pos - tp
        f1 = 2 * tp / (2 * tp + fp + fn)
        thresholds[j] = cand[int(np.argmax(f1))]
    return thresholds


def finetune(bundle, external_corpus, external_splits, mode, data_fraction,
             cfg: TrainConfig, *, seed=0, level="disorder", out_dir=None):
    """Adapt a trained checkpoint bundle to an external corpus.

    single_image drops the fusion module and classifies each (single-scan)
    case from its visual embedding; multi_image inherits encoder and fusion.
    The classification layer is always trained from scratch at the external
    label space's width.
    """
    if mode not in ("single_image", "multi_image"):
        raise UsageError(f"unknown finetune mode {mode!r}")
    if data_fraction not in DATA_FRACTIONS:
        raise UsageError(f"data fraction must be one of {DATA_FRACTIONS}")
    label_space = build_label_space(external_corpus, level, external_splits)
    encoder_cfg = bundle["encoder_cfg"]
    geometry = bundle["geometry"]
    source = bundle["model"]
    torch.manual_seed(seed)
    if mode == "single_image":
        model = build_model(encoder_cfg, len(label_space.classes), fusion_mode="mean")
        model.encoder.load_state_dict(source.encoder.state_dict())
        fusion_cfg = None
    else:
        fusion_cfg = bundle["fusion_cfg"] or FusionConfig(embed_dim=encoder_cfg.embed_dim)
        model = build_model(
            encoder_cfg, len(label_space.classes), fusion_mode="learnable",
            fusion_cfg=fusion_cfg,
        )
        model.encoder.load_state_dict(source.encoder.state_dict())
        if source.fusion is not None:
            model.fusion.load_state_dict(source.fusion.state_dict())
    train_cases = external_splits.cases_in(external_corpus, "train")
    train_cases = subsample_cases(train_cases, data_fraction, seed)
    result = train_model(
        model, train_cases, label_space, cfg,
        seed=seed, geometry=geometry,
        val_cases=external_splits.cases_in(external_corpus, "val"),
        out_dir=out_dir, encoder_cfg=encoder_cfg, fusion_cfg=fusion_cfg,
    )
    result["label_space"] = label_space
    return result


ZERO_SHOT_NOTE = (
    "ranking metrics (AUC) are undefined after the OR-merge; only F1/MCC/ACC are emitted"
)


def zero_shot_predict(prob_matrix, internal_classes, mapping, thresholds):
    """OR-merge internal thresholded predictions into external classes.

    prob_matrix: (n, c_internal); mapping: external class -> iterable of
    internal class ids (must be non-empty); thresholds: per-internal-class
    array aligned with internal_classes. Returns (binary matrix (n, c_ext),
    external class order, note).
    """
    probs = np.asarray(prob_matrix, dtype=np.float64)
    thr = np.asarray(thresholds, dtype=np.float64)
    index = {c: i for i, c in enumerate(internal_classes)}
    internal_pred = probs >= thr[None, :]
    ext_classes = sorted(mapping)
    out = np.zeros((probs.shape[0], len(ext_classes)), dtype=np.int64)
    for j, ext in enumerate(ext_classes):
        members = list(mapping[ext])
        if not members:
            raise DataError(f"external class {ext!r} has an empty mapping")
        unknown = [m for m in members if m not in index]
        if unknown:
            raise DataError(f"external class {ext!r} maps to unknown classes {unknown}")
        cols = [index[m] for m in members]
        out[:, j] = internal_pred[:, cols].any(axis=1)
    return out, ext_classes, ZERO_SHOT_NOTE
