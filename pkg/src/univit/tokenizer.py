"""Turn 2D images and 3D volumes into patch tokens in one 3D coordinate frame.

2D images are zero-padded along depth to a pseudo-volume of depth ``P`` (image
at slice 0), so cubic patchification always yields tokens of width ``C*P^3``
and a 2D image ends up with ``G_Z = 1`` and all depth coordinates equal to 0.
Patch vectors are flattened channel-first, then z, h, w row-major.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .substrate import ShapeError, Tensor, add, matmul

XRAY2D = "xray2d"
CT3D = "ct3d"
MODALITIES = (XRAY2D, CT3D)


@dataclass
class Volume:
    """Channel-first ``C x Z x H x W`` array with a modality tag."""

    data: np.ndarray
    modality: str
    intensity_range: tuple | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ShapeError(f"Volume needs C x Z x H x W data, got shape {self.data.shape}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if not np.isfinite(self.data).all():
            raise ValueError("Volume contains non-finite values")

    @property
    def shape(self):
        return self.data.shape

    @property
    def spatial(self):
        return self.data.shape[1:]


@dataclass
class TokenSequence:
    """Tokens (or raw patches) of one sample plus their grid coordinates."""

    tokens: np.ndarray
    coords: np.ndarray
    grid_shape: tuple
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens.shape[0] != int(np.prod(self.grid_shape)):
            raise ShapeError(f"{self.tokens.shape[0]} tokens for grid {self.grid_shape}")
        if self.coords.shape != (self.tokens.shape[0], 3):
            raise ShapeError(f"coords shape {self.coords.shape} for {self.tokens.shape[0]} tokens")

    def __len__(self):
        return self.tokens.shape[0]


def promote_to_pseudo_volume(image: Volume, P: int) -> Volume:
    if image.modality != XRAY2D:
        raise ValueError(f"only {XRAY2D} images are promoted, got {image.modality}")
    C, Z, H, W = image.shape
    if Z != 1:
        raise ShapeError(f"pseudo-volume promotion needs Z=1, got Z={Z}")
    out = np.zeros((C, P, H, W), dtype=image.data.dtype)
    out[:, 0] = image.data[:, 0]
    return Volume(out, image.modality, image.intensity_range)


def patchify(volume: Volume | np.ndarray, P: int) -> tuple[np.ndarray, tuple]:
    """Split into non-overlapping P^3 cubes; returns ``(S x C*P^3 patches, grid)``."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    C, Z, H, W = data.shape
    bad = {ax: n for ax, n in zip("ZHW", (Z, H, W)) if n % P}
    if bad:
        need = {ax: (-n) % P for ax, n in bad.items()}
        raise ShapeError(f"dims {dict(zip('ZHW', (Z, H, W)))} not divisible by P={P}; padding needed: {need}")
    gz, gh, gw = Z // P, H // P, W // P
    x = data.reshape(C, gz, P, gh, P, gw, P)
    x = x.transpose(1, 3, 5, 0, 2, 4, 6)  # gz gh gw | C pz ph pw
    return np.ascontiguousarray(x).reshape(gz * gh * gw, C * P**3), (gz, gh, gw)


def unpatchify(patches: np.ndarray, grid_shape: tuple, P: int, C: int = 1) -> np.ndarray:
    gz, gh, gw = grid_shape
    x = patches.reshape(gz, gh, gw, C, P, P, P).transpose(3, 0, 4, 1, 5, 2, 6)
    return np.ascontiguousarray(x).reshape(C, gz * P, gh * P, gw * P)


def axis_coords(g: int, alpha: float) -> np.ndarray:
    if g < 1:
        raise ValueError(f"grid size must be >= 1, got {g}")
    return alpha * np.arange(g, dtype=np.float64) / max(g - 1, 1)


def grid_coords(grid_shape: tuple, alpha: float = 128.0) -> np.ndarray:
    """Per-patch (z, h, w) coordinates in patchify order, each axis scaled to [0, alpha]."""
    cz, ch, cw = (axis_coords(g, alpha) for g in grid_shape)
    zz, hh, ww = np.meshgrid(cz, ch, cw, indexing="ij")
    return np.stack([zz.ravel(), hh.ravel(), ww.ravel()], axis=1).astype(np.float32)


def embed_patches(patches, projection: Tensor, bias: Tensor) -> Tensor:
    patches = patches if isinstance(patches, Tensor) else Tensor(patches)
    if patches.shape[-1] != projection.shape[0] or bias.shape != (projection.shape[1],):
        raise ShapeError(
            f"embed_patches: patches {patches.shape}, projection {projection.shape}, bias {bias.shape}"
        )
    return add(matmul(patches, projection), bias)


def tokenize(volume: Volume, P: int, alpha: float = 128.0, meta: dict | None = None) -> TokenSequence:
    """Promote (if 2D), patchify and attach coordinates. Tokens are raw patch vectors."""
    if volume.modality == XRAY2D and volume.shape[1] == 1:
        volume = promote_to_pseudo_volume(volume, P)
    patches, grid = patchify(volume, P)
    info = {"modality": volume.modality}
    info.update(meta or {})
    return TokenSequence(patches.astype(np.float32, copy=False), grid_coords(grid, alpha), grid, info)
