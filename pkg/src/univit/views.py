"""Intensity normalisation, long-side downsizing and multi-crop view sampling.

Randomness comes from numpy's Philox counter-based generator keyed by
``(seed, sample_id, epoch)`` so a view set is reproducible on any platform.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .tokenizer import CT3D, XRAY2D, Volume

GLOBAL = "global"
LOCAL = "local"


@dataclass(frozen=True)
class ViewConfig:
    n_global: int = 2
    n_local: int = 8
    global_scale: tuple = (0.3, 1.0)
    local_scale: tuple = (0.05, 0.3)
    long_side_2d: int = 224
    long_side_3d: int = 112
    patch: int = 14

    def __post_init__(self):
        for lo, hi in (self.global_scale, self.local_scale):
            if not (0 < lo <= hi <= 1):
                raise ValueError(f"scale range ({lo}, {hi}) must lie in (0, 1]")
        if self.global_scale[1] != 1.0:
            raise ValueError("global scale range must end at 1.0")
        if self.n_global < 1 or self.n_local < 0:
            raise ValueError("need n_global >= 1 and n_local >= 0")

    @property
    def n_views(self) -> int:
        return self.n_global + self.n_local


@dataclass
class ViewSet:
    views: list
    roles: list
    sample_id: int
    labels: np.ndarray | None = None
    meta: dict = field(default_factory=dict)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by a seed plus integer stream identifiers."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) for k in keys)])
    return np.random.Generator(np.random.Philox(ss))


def normalize_xray(image: Volume) -> Volume:
    x = image.data.astype(np.float32)
    if not np.isfinite(x).all():
        raise ValueError("normalize_xray: non-finite pixels")
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return Volume(np.zeros_like(x), image.modality, (-1.0, 1.0))
    out = (x.astype(np.float64) - lo) / (hi - lo) * 2.0 - 1.0
    return Volume(np.clip(out, -1.0, 1.0).astype(np.float32), image.modality, (-1.0, 1.0))


def normalize_ct(volume: Volume, window: float = 2500.0, level: float = 250.0) -> Volume:
    """Clamp to [level - window/2, level + window/2] and map linearly onto [-1, 1]."""
    x = volume.data.astype(np.float64)
    if not np.isfinite(x).all():
        raise ValueError("normalize_ct: non-finite values")
    lo, hi = level - window / 2.0, level + window / 2.0
    out = (np.clip(x, lo, hi) - lo) / (hi - lo) * 2.0 - 1.0
    return Volume(out.astype(np.float32), volume.modality, (-1.0, 1.0))


def normalize(volume: Volume) -> Volume:
    return normalize_xray(volume) if volume.modality == XRAY2D else normalize_ct(volume)


def downsize_long_side(v: Volume, target: int, patch: int = 14) -> Volume:
    if target < patch:
        raise ValueError(f"target {target} smaller than patch size {patch}")
    axes = (2, 3) if v.modality == XRAY2D else (1, 2, 3)
    dims = [v.shape[a] for a in axes]
    long = max(dims)
    if long == target:
        return v
    factor = target / long
    new = [target if n == long else int(round(n * factor)) for n in dims]
    if min(new) < patch:
        raise ValueError(f"downsizing {dims} to long side {target} gives axis {min(new)} < patch {patch}")
    zoom = [1.0] * 4
    for a, n_old, n_new in zip(axes, dims, new):
        zoom[a] = n_new / n_old
    out = ndimage.zoom(v.data.astype(np.float32), zoom, order=1, mode="nearest", grid_mode=False)
    return Volume(out.astype(np.float32), v.modality, v.intensity_range)


def _crop_box(rng: np.random.Generator, dims, scale, patch: int):
    """Crop start/extent per spatial axis.

    Area (2D) or volume (3D) fraction ~ U(scale); each axis extent is
    round(len * s^(1/ndim)); the start is uniform; the extent is then snapped
    down to a multiple of ``patch`` and centred inside the unsnapped window.
    """
    s = rng.uniform(scale[0], scale[1])
    starts, extents = [], []
    for n in dims:
        raw = int(min(max(round(n * s ** (1.0 / len(dims))), 1), n))
        start = int(rng.integers(0, n - raw + 1))
        snapped = max(patch, (raw // patch) * patch)
        snapped = min(snapped, (n // patch) * patch)
        start = min(max(start + (raw - snapped) // 2, 0), n - snapped)
        starts.append(start)
        extents.append(snapped)
    return starts, extents, s


def center_view(v: Volume, patch: int) -> Volume:
    """The maximal patch-multiple central region (used for frozen-feature extraction)."""
    axes = (2, 3) if v.modality == XRAY2D else (1, 2, 3)
    sl = [slice(None)] * 4
    for a in axes:
        n = v.shape[a]
        e = (n // patch) * patch
        if e == 0:
            raise ValueError(f"axis of length {n} smaller than patch {patch}")
        o = (n - e) // 2
        sl[a] = slice(o, o + e)
    return Volume(np.ascontiguousarray(v.data[tuple(sl)]), v.modality, v.intensity_range)


def sample_views(v: Volume, cfg: ViewConfig, rng_seed: int, sample_id: int = 0, epoch: int = 0) -> ViewSet:
    axes = (2, 3) if v.modality == XRAY2D else (1, 2, 3)
    dims = [v.shape[a] for a in axes]
    if min(dims) < cfg.patch:
        raise ValueError(f"input spatial dims {dims} smaller than patch {cfg.patch}")
    rng = make_rng(rng_seed, sample_id, epoch)
    views, roles = [], []
    for role, count, scale in ((GLOBAL, cfg.n_global, cfg.global_scale), (LOCAL, cfg.n_local, cfg.local_scale)):
        for _ in range(count):
            starts, extents, _ = _crop_box(rng, dims, scale, cfg.patch)
            sl = [slice(None)] * 4
            for a, s0, e in zip(axes, starts, extents):
                sl[a] = slice(s0, s0 + e)
            views.append(Volume(np.ascontiguousarray(v.data[tuple(sl)]), v.modality, v.intensity_range))
            roles.append(role)
    return ViewSet(views, roles, sample_id)


def crop_fractions(dims, scale, patch: int, n: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Pre-snap scale draws and post-snap crop fractions for ``n`` sampled boxes."""
    rng = make_rng(seed)
    pre, post = np.empty(n), np.empty(n)
    total = float(np.prod(dims))
    for i in range(n):
        _, extents, s = _crop_box(rng, dims, scale, patch)
        pre[i] = s
        post[i] = np.prod(extents) / total
    return pre, post


__all__ = [
    "CT3D", "XRAY2D", "GLOBAL", "LOCAL", "ViewConfig", "ViewSet", "make_rng", "normalize_xray",
    "normalize_ct", "normalize", "downsize_long_side", "center_view", "sample_views", "crop_fractions",
]
