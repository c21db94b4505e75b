"""Rotary position embedding over three spatial axes.

``head_dim`` is split into three equal blocks (z, h, w). Inside each block the
components are paired as (2j, 2j+1) and pair j is rotated by ``coord_axis * f_j``
with ``f_j = base ** (-2j / (head_dim / 3))``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .substrate import ShapeError, Tensor, custom_op


@dataclass(frozen=True)
class RopeTable:
    base: float
    head_dim: int
    freqs: np.ndarray  # per-axis frequencies, length head_dim // 6

    @property
    def axis_dim(self) -> int:
        return self.head_dim // 3


def build_rope_table(head_dim: int, base: float = 10000.0) -> RopeTable:
    if head_dim <= 0 or head_dim % 6:
        raise ValueError(
            f"head_dim={head_dim} must be a positive multiple of 6: three axes, "
            "each needing an even number of dimensions to form rotation pairs"
        )
    axis_dim = head_dim // 3
    j = np.arange(axis_dim // 2, dtype=np.float64)
    freqs = float(base) ** (-2.0 * j / axis_dim)
    return RopeTable(float(base), head_dim, freqs)


def rope_angles(coords: np.ndarray, table: RopeTable) -> np.ndarray:
    """Angles of shape S x (head_dim/2), ordered axis-major (z pairs, h pairs, w pairs)."""
    coords = np.asarray(coords, dtype=np.float64)
    return (coords[:, :, None] * table.freqs[None, None, :]).reshape(coords.shape[0], -1)


def _rotate(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: S x H x D ; cos/sin: S x 1 x D/2
    even, odd = x[..., 0::2], x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def apply_rope(vectors, coords: np.ndarray, table: RopeTable) -> Tensor:
    """Rotate S x n_heads x head_dim query/key vectors by their token coordinates."""
    v = vectors if isinstance(vectors, Tensor) else Tensor(vectors)
    if v.ndim != 3 or v.shape[-1] != table.head_dim:
        raise ShapeError(f"apply_rope: vectors {v.shape} vs head_dim {table.head_dim}")
    coords = np.asarray(coords)
    if coords.shape != (v.shape[0], 3):
        raise ShapeError(f"apply_rope: coords {coords.shape} for {v.shape[0]} tokens")
    ang = rope_angles(coords, table)[:, None, :]
    cos = np.cos(ang).astype(v.dtype)
    sin = np.sin(ang).astype(v.dtype)
    out = _rotate(v.data, cos, sin)
    return custom_op("rope3d", out, (v,), lambda g: (_rotate(g, cos, -sin),))
