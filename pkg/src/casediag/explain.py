"""Score-CAM saliency maps: which image regions drive a class prediction.

For each channel of a convolutional feature map, the channel's activation is
upsampled to the input plane, min-max normalized, and used to mask the
selected scan; the target-class score of the masked case, minus the score
with the scan fully blanked, is that channel's weight. The rectified weighted
sum of the normalized channel maps, scaled to [0, 1], is the saliency map.

The hook point is the last convolutional stage: the shared residual trunk for
the resnet variant, the per-slice network (at the selected slice) for the
mixing variant. The pure-ViT variant has no convolutional stage and is
rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .encoders import encode, encode_batch
from .errors import DataError, UsageError
from .model import CaseModel, case_rng
from .preprocess import CanonicalGeometry, minmax_scale, normalize_scan, resize_bilinear


@dataclass
class SaliencyMap:
    """Heat values in [0, 1], shaped like the input plane (H, W)."""

    values: np.ndarray
    target_class: str
    case_id: str
    scan_id: str
    slice_index: int | None


def _capture_activations(model, tensor, variant, slice_index):
    impl = model.encoder.impl
    module = impl.shared if variant == "resnet" else impl.slice_net
    grabbed = {}

    def hook(_module, _inputs, output):
        grabbed["act"] = output.detach()

    handle = module.register_forward_hook(hook)
    try:
        encode(model.encoder, tensor, mode="eval")
    finally:
        handle.remove()
    act = grabbed["act"]
    if variant == "resnet":
        return act[0]  # (C, h, w)
    # mixing: rows are slices of the single scan
    d = tensor.values.shape[2]
    if slice_index is None:
        slice_index = tensor.key_slice if tensor.key_slice is not None else d // 2
    if not 0 <= slice_index < d:
        raise DataError(f"slice index {slice_index} outside depth {d}")
    return act[slice_index]


def score_cam(model: CaseModel, case, label_space, target_class, *,
              geometry=CanonicalGeometry(), scan_index=0, slice_index=None,
              seed=0, batch_size=16) -> SaliencyMap:
    """Score-CAM for one case, one target class, one selected scan."""
    variant = model.encoder.cfg.variant
    if variant == "vit":
        raise UsageError(
            "score_cam is unsupported for the pure-ViT variant: no convolutional stage to hook"
        )
    if target_class not in label_space.classes:
        raise DataError(f"target class {target_class!r} not in the label space")
    target = label_space.index(target_class)
    if not 0 <= scan_index < len(case.scans):
        raise DataError(f"scan index {scan_index} outside case with {len(case.scans)} scans")

    model.eval()
    tensors = [normalize_scan(s, geometry) for s in case.scans]
    modalities = [s.modality for s in case.scans]
    selected = tensors[scan_index]

    with torch.no_grad():
        act = _capture_activations(model, selected, variant, slice_index)
        channels = act.cpu().numpy().astype(np.float64)  # (C, h, w)
        h, w = selected.values.shape[:2]
        masks = np.stack([minmax_scale(resize_bilinear(c, h, w)) for c in channels])

        base_vectors = [
            e.vector
            for e in encode_batch(model.encoder, tensors, mode="eval")
        ]

        def case_score(selected_vector):
            vectors = list(base_vectors)
            vectors[scan_index] = selected_vector
            probs = model.classify_vectors(
                torch.stack(vectors), modalities, rng=case_rng(seed, case.case_id)
            )
            return float(probs[target])

        zero_tensor = replace(selected, values=np.zeros_like(selected.values))
        baseline = case_score(
            encode_batch(model.encoder, [zero_tensor], mode="eval")[0].vector
        )

        weights = np.zeros(len(masks))
        for start in range(0, len(masks), batch_size):
            chunk = masks[start : start + batch_size]
            masked = [
                replace(selected, values=(selected.values * m[:, :, None]).astype(np.float32))
                for m in chunk
            ]
            embs = encode_batch(model.encoder, masked, mode="eval")
            for i, e in enumerate(embs):
                weights[start + i] = case_score(e.vector) - baseline

    saliency = np.maximum((weights[:, None, None] * masks).sum(axis=0), 0.0)
    peak = saliency.max()
    if peak > 0:
        saliency = saliency / peak
    key = selected.key_slice
    return SaliencyMap(
        values=saliency.astype(np.float32),
        target_class=target_class,
        case_id=case.case_id,
        scan_id=case.scans[scan_index].scan_id,
        slice_index=slice_index if slice_index is not None else key,
    )
