"""Scan preprocessing: canonical geometry, intensity scaling, augmentation.

Every scan is brought to a shared H x W x D tensor (D=1 for 2D scans) so the
encoders see one input contract. Height/width use bilinear interpolation with
corner alignment; depth uses nearest-index resampling; intensities are min-max
scaled to [0, 1] with constant scans mapping to all zeros.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .corpus import Case, Scan, substitute_scan
from .errors import DataError


@dataclass(frozen=True)
class CanonicalGeometry:
    height: int = 256
    width: int = 256
    depth: int = 32

    def __post_init__(self):
        if self.height < 2 or self.width < 2 or self.depth < 1:
            raise ValueError("canonical geometry must be at least 2x2x1")


@dataclass
class CanonicalScanTensor:
    """A scan in canonical geometry: float32 values (H, W, D) in [0, 1]."""

    values: np.ndarray
    modality: str
    dims: str
    key_slice: int | None = None


def _axis_coords(n_out, n_in):
    # Corner-aligned sampling: endpoints map to endpoints exactly.
    if n_out == 1 or n_in == 1:
        return np.zeros(n_out)
    return np.arange(n_out) * (n_in - 1) / (n_out - 1)


def resize_bilinear(values, out_h, out_w):
    """Separable bilinear resize of (H, W, ...) along the first two axes."""
    in_h, in_w = values.shape[:2]
    ys = _axis_coords(out_h, in_h)
    xs = _axis_coords(out_w, in_w)
    y0 = np.floor(ys).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    wy = (ys - y0).reshape(-1, *([1] * (values.ndim - 1)))
    rows = values[y0] * (1 - wy) + values[y1] * wy
    x0 = np.floor(xs).astype(int)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wx = (xs - x0).reshape(1, -1, *([1] * (values.ndim - 2)))
    return rows[:, x0] * (1 - wx) + rows[:, x1] * wx


def resample_depth(values, out_d):
    """Nearest-index depth resampling of (H, W, D): slice floor(i * D_in / D_out)."""
    in_d = values.shape[2]
    idx = np.floor(np.arange(out_d) * in_d / out_d).astype(int)
    return values[:, :, idx]


def minmax_scale(values):
    lo = float(values.min())
    hi = float(values.max())
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float32)
    return ((values - lo) / (hi - lo)).astype(np.float32)


def normalize_scan(scan: Scan, geometry: CanonicalGeometry = CanonicalGeometry()) -> CanonicalScanTensor:
    """Resize to canonical geometry and min-max scale to [0, 1].

    2D scans keep depth 1 regardless of the geometry's depth.
    """
    raw = scan.load().astype(np.float64)
    if raw.size == 0:
        raise DataError(f"scan {scan.scan_id} has an empty voxel array")
    if not np.isfinite(raw).all():
        raise DataError(f"scan {scan.scan_id} contains non-finite voxels")
    if scan.dims == "2D":
        vol = raw[:, :, None]
        out_d = 1
    else:
        vol = raw
        out_d = geometry.depth
    vol = resize_bilinear(vol, geometry.height, geometry.width)
    if vol.shape[2] != out_d:
        vol = resample_depth(vol, out_d)
    key = None
    if scan.dims == "3D":
        in_d = raw.shape[2]
        src = scan.key_slice if scan.key_slice is not None else in_d // 2
        depth_map = np.floor(np.arange(out_d) * in_d / out_d).astype(int)
        key = int(np.argmin(np.abs(depth_map - src)))
    return CanonicalScanTensor(
        values=minmax_scale(vol), modality=scan.modality, dims=scan.dims, key_slice=key
    )


@dataclass(frozen=True)
class AugmentConfig:
    p_apply: float = 0.15
    noise_sigma: tuple = (0.01, 0.05)
    gamma: tuple = (0.7, 1.3)
    max_rotation_deg: float = 10.0
    elastic_alpha: float = 4.0
    elastic_sigma: float = 8.0


def augment(tensor: CanonicalScanTensor, seed, config: AugmentConfig = AugmentConfig()):
    """Apply each of four augmentations independently with probability p_apply.

    Gaussian noise, gamma contrast, small in-plane rotation, and a slice-wise
    elastic warp. Output stays in [0, 1] with the input's shape; the input
    tensor is never modified. Deterministic for a fixed (input, seed).
    """
    rng = np.random.default_rng(seed)
    v = tensor.values.astype(np.float64)
    p = config.p_apply
    if rng.random() < p:
        sigma = rng.uniform(*config.noise_sigma)
        v = v + sigma * rng.standard_normal(v.shape)
    if rng.random() < p:
        gamma = rng.uniform(*config.gamma)
        v = np.clip(v, 0.0, 1.0) ** gamma
    if rng.random() < p:
        angle = rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)
        v = ndimage.rotate(v, angle, axes=(0, 1), reshape=False, order=1, mode="constant")
    if rng.random() < p:
        v = _elastic(v, rng, config)
    v = np.clip(v, 0.0, 1.0).astype(np.float32)
    return replace(tensor, values=v)


def _elastic(v, rng, config):
    h, w, d = v.shape
    out = np.empty_like(v)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    for z in range(d):
        dy = ndimage.gaussian_filter(rng.standard_normal((h, w)), config.elastic_sigma)
        dx = ndimage.gaussian_filter(rng.standard_normal((h, w)), config.elastic_sigma)
        dy *= config.elastic_alpha / (np.abs(dy).max() + 1e-12)
        dx *= config.elastic_alpha / (np.abs(dx).max() + 1e-12)
        out[:, :, z] = ndimage.map_coordinates(
            v[:, :, z], [rows + dy, cols + dx], order=1, mode="reflect"
        )
    return out


def key_slice_substitute(case: Case, prob: float, seed) -> Case:
    """Replace each 3D scan, with probability prob, by its 2D key slice.

    The replacement keeps the scan id and modality; its voxels are the key
    slice at the scan's original resolution. 2D scans and 3D scans without a
    key_slice are never touched.
    """
    if not 0.0 <= prob <= 1.0:
        raise ValueError("substitution probability must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    result = case
    for idx, scan in enumerate(case.scans):
        if scan.dims != "3D" or scan.key_slice is None:
            continue
        if rng.random() >= prob:
            continue
        vol = scan.load()
        flat = Scan(
            scan_id=scan.scan_id,
            modality=scan.modality,
            dims="2D",
            voxels=vol[:, :, scan.key_slice].copy(),
        )
        result = substitute_scan(result, idx, flat)
    return result
