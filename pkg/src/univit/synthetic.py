"""Synthetic chest-like 2D images and 3D volumes with five planted findings.

Each label, when active, plants one geometric structure. The 2D version of a
structure is the (h, w) cross-section of its 3D version, so the same finding
occupies the same in-plane region in both modalities:

==============  =====================================================
label           structure
==============  =====================================================
enlarged_disk   bright ellipse / ellipsoid in the centre
band            bright horizontal band / slab near the bottom
blob_cluster    four small bright disks / spheres in the upper left
gradient_wedge  triangular wedge on the left with an intensity ramp
corner_cap      bright cap around the upper-right corner
==============  =====================================================

2D images are in 8-bit-like pixel units, 3D volumes in HU-like units; both go
through the modality-specific normalisation in :mod:`univit.views`.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from .tokenizer import CT3D, XRAY2D, Volume
from .views import make_rng

LABELS = ("enlarged_disk", "band", "blob_cluster", "gradient_wedge", "corner_cap")
N_LABELS = len(LABELS)
LABEL_RATE = 0.4
MODALITY_CODE = {XRAY2D: 0, CT3D: 1}
CODE_MODALITY = {v: k for k, v in MODALITY_CODE.items()}

DEFAULT_SHAPE = {XRAY2D: (1, 1, 224, 224), CT3D: (1, 112, 112, 112)}

# (offset, smooth-noise amplitude, pixel-noise std, structure contrast) per modality/domain
INTENSITY = {
    (XRAY2D, "default"): (70.0, 15.0, 8.0, 70.0),
    (CT3D, "default"): (-300.0, 100.0, 60.0, 700.0),
    (XRAY2D, "shifted"): (60.0, 30.0, 14.0, 70.0),
    (CT3D, "shifted"): (-420.0, 200.0, 100.0, 700.0),
}

# per-label contrast multiplier so structures differ in brightness as well as shape
LABEL_GAIN = (1.3, 1.0, 2.0, 1.6, 1.4)

BLOB_OFFSETS = ((0.0, 0.0), (0.13, 0.05), (0.03, 0.15), (0.16, 0.18))


@dataclass
class SyntheticSample:
    volume: Volume
    labels: np.ndarray
    sample_id: int

    @property
    def modality(self) -> str:
        return self.volume.modality


def _grids(shape):
    """Normalised [0, 1] coordinates (z, h, w) broadcastable to the spatial shape."""
    z, h, w = shape
    gz = (np.arange(z, dtype=np.float32) + 0.5) / z if z > 1 else np.full(1, 0.5, dtype=np.float32)
    gh = (np.arange(h, dtype=np.float32) + 0.5) / h
    gw = (np.arange(w, dtype=np.float32) + 0.5) / w
    return gz[:, None, None], gh[None, :, None], gw[None, None, :]


def structure_masks(shape, jitter=None) -> dict[str, np.ndarray]:
    """Soft masks in [0, 1] of every structure on a (Z, H, W) grid.

    For Z == 1 the masks are the mid-depth cross-sections of the 3D structures.
    ``jitter`` (a dict of small offsets) perturbs positions per sample.
    """
    jitter = jitter or {}
    z, h, w = _grids(shape)
    dz, dh, dw = jitter.get("disk", (0.0, 0.0, 0.0))
    masks = {}
    r2 = ((h - 0.55 - dh) / 0.22) ** 2 + ((w - 0.5 - dw) / 0.24) ** 2 + ((z - 0.5 - dz) / 0.3) ** 2
    masks["enlarged_disk"] = (r2 <= 1.0).astype(np.float32)
    bh = jitter.get("band", 0.0)
    band = (h >= 0.80 + bh) & (h <= 0.93 + bh) & (w >= 0.08) & (w <= 0.92) & (np.abs(z - 0.5) <= 0.35)
    masks["band"] = band.astype(np.float32)
    ch, cw = jitter.get("blob", (0.0, 0.0))
    blobs = np.zeros(np.broadcast_shapes(z.shape, h.shape, w.shape), dtype=bool)
    # three depth layers; the mid layer is the one a 2D grid (z = 0.5) cuts through
    for layer, (lz, lh, lw) in enumerate(((0.5, 0.0, 0.0), (0.27, 0.05, 0.08), (0.73, 0.08, 0.02))):
        for i, (oh, ow) in enumerate(BLOB_OFFSETS):
            oz = lz + (0.03 if i % 2 else -0.03)
            blobs |= ((h - 0.14 - ch - oh - lh) ** 2 + (w - 0.13 - cw - ow - lw) ** 2 + (z - oz) ** 2) <= 0.07**2
    masks["blob_cluster"] = blobs.astype(np.float32)
    wh = jitter.get("wedge", 0.0)
    t = (h - 0.38 - wh) / 0.38
    wedge = (t >= 0) & (t <= 1) & (w <= 0.05 + 0.3 * t) & (np.abs(z - 0.5) <= 0.3)
    ramp = np.clip(t, 0, 1)
    masks["gradient_wedge"] = (wedge * (0.4 + 0.6 * ramp)).astype(np.float32)
    rc = jitter.get("cap", 0.0)
    cap = (h**2 + (w - 1.0) ** 2 + 0.5 * (z - 0.5) ** 2) <= (0.30 + rc) ** 2
    masks["corner_cap"] = cap.astype(np.float32)
    full = np.broadcast_shapes(z.shape, h.shape, w.shape)
    return {k: np.broadcast_to(v, full).astype(np.float32) for k, v in masks.items()}


def _interp_matrix(n: int, m: int) -> np.ndarray:
    """n x m Gaussian-kernel interpolation weights from m coarse knots to n points."""
    if n == 1 or m == 1:
        return np.ones((n, 1))
    x = (np.arange(n) + 0.5) / n
    knots = (np.arange(m) + 0.5) / m
    k = np.exp(-0.5 * ((x[:, None] - knots[None, :]) * m) ** 2)
    return k / np.sqrt((k**2).sum(axis=1, keepdims=True))


def smooth_noise(rng: np.random.Generator, shape, coarse: int = 6) -> np.ndarray:
    """Unit-variance low-frequency noise: separable smooth upsampling of a coarse Gaussian grid."""
    cshape = tuple(coarse if n > 1 else 1 for n in shape)
    c = rng.standard_normal(cshape)
    mz, mh, mw = (_interp_matrix(n, m) for n, m in zip(shape, cshape))
    return np.einsum("abc,za,hb,wc->zhw", c, mz, mh, mw, optimize=True).astype(np.float32)


def make_sample(seed: int, modality: str, index: int, shape=None, domain: str = "default",
                plant: bool = True) -> SyntheticSample:
    shape = tuple(shape or DEFAULT_SHAPE[modality])
    spatial = shape[1:]
    rng = make_rng(seed, MODALITY_CODE[modality], index, 0 if domain == "default" else 1)
    labels = (rng.random(N_LABELS) < LABEL_RATE).astype(np.uint8)
    offset, amp, pix, contrast = INTENSITY[(modality, domain)]
    jitter = {
        "disk": tuple(rng.uniform(-0.03, 0.03, 3)),
        "band": float(rng.uniform(-0.02, 0.02)),
        "blob": tuple(rng.uniform(-0.03, 0.03, 2)),
        "wedge": float(rng.uniform(-0.03, 0.03)),
        "cap": float(rng.uniform(-0.02, 0.02)),
    }
    gains = rng.uniform(0.8, 1.2, N_LABELS)
    img = offset + amp * smooth_noise(rng, spatial) + pix * rng.standard_normal(spatial).astype(np.float32)
    if plant and labels.any():
        masks = structure_masks(spatial, jitter)
        for j, name in enumerate(LABELS):
            if labels[j]:
                img = img + contrast * LABEL_GAIN[j] * gains[j] * masks[name]
    if modality == XRAY2D:
        img = _radiograph_frame(np.clip(img, 0.0, 255.0))
    data = img.astype(np.float32).reshape(shape)
    rng_range = (0.0, 255.0) if modality == XRAY2D else (-1024.0, 3071.0)
    return SyntheticSample(Volume(data, modality, rng_range), labels, index)


def _radiograph_frame(img: np.ndarray) -> np.ndarray:
    """Dark collimator border plus a burned-in bright marker, as on real films.

    Pins the per-image min and max so min-max scaling does not depend on labels.
    """
    img = img.copy()
    _, h, w = img.shape
    b = max(1, round(0.01 * min(h, w)))
    img[:, :b, :] = img[:, -b:, :] = 0.0
    img[:, :, :b] = img[:, :, -b:] = 0.0
    m = max(2, round(0.03 * min(h, w)))
    img[:, b + 1:b + 1 + m, b + 1:b + 1 + m] = 255.0
    return img


def gen_synthetic(seed: int, modality: str, n: int, shape=None, domain: str = "default",
                  plant: bool = True, start: int = 0) -> list[SyntheticSample]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return [make_sample(seed, modality, start + i, shape, domain, plant) for i in range(n)]


class SyntheticDataset:
    """Lazily generated samples ``start .. start + n - 1`` with a small cache."""

    def __init__(self, seed: int, modality: str, n: int, shape=None, domain: str = "default",
                 start: int = 0, cache_size: int = 64):
        if n < 1:
            raise ValueError("n must be >= 1")
        self.seed, self.modality, self.n = seed, modality, n
        self.shape, self.domain, self.start = shape, domain, start
        self.cache_size = cache_size
        self._cache: dict[int, SyntheticSample] = {}

    def __len__(self):
        return self.n

    def __getitem__(self, i: int) -> SyntheticSample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        s = self._cache.get(i)
        if s is None:
            s = make_sample(self.seed, self.modality, self.start + i, self.shape, self.domain)
            if len(self._cache) >= self.cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[i] = s
        return s

    def labels(self) -> np.ndarray:
        # label draws come first in the per-sample stream, so this avoids building images
        out = np.empty((self.n, N_LABELS), dtype=np.uint8)
        for i in range(self.n):
            rng = make_rng(self.seed, MODALITY_CODE[self.modality], self.start + i,
                           0 if self.domain == "default" else 1)
            out[i] = rng.random(N_LABELS) < LABEL_RATE
        return out


# ---------------------------------------------------------------------------
# MMV-RAW sample files

RAW_MAGIC = b"MMV1"
_RAW_HEADER = struct.Struct("<4sBB4I")


class FormatError(ValueError):
    pass


def labels_to_mask(labels) -> int:
    return int(sum(int(b) << i for i, b in enumerate(labels)))


def mask_to_labels(mask: int) -> np.ndarray:
    return np.array([(mask >> i) & 1 for i in range(N_LABELS)], dtype=np.uint8)


def encode_raw(sample: SyntheticSample) -> bytes:
    data = np.ascontiguousarray(sample.volume.data, dtype="<f4")
    payload = data.tobytes()
    head = _RAW_HEADER.pack(RAW_MAGIC, MODALITY_CODE[sample.modality], labels_to_mask(sample.labels), *data.shape)
    return head + payload + struct.pack("<I", zlib.crc32(payload))


def decode_raw(buf: bytes, sample_id: int = 0) -> SyntheticSample:
    if len(buf) < _RAW_HEADER.size + 4:
        raise FormatError(f"file too short ({len(buf)} bytes)")
    magic, code, mask, c, z, h, w = _RAW_HEADER.unpack_from(buf)
    if magic != RAW_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if code not in CODE_MODALITY:
        raise FormatError(f"unknown modality code {code}")
    n = c * z * h * w
    expected = _RAW_HEADER.size + 4 * n + 4
    if len(buf) != expected:
        raise FormatError(f"length {len(buf)} != expected {expected} for dims {(c, z, h, w)}")
    payload = buf[_RAW_HEADER.size:_RAW_HEADER.size + 4 * n]
    (crc,) = struct.unpack_from("<I", buf, expected - 4)
    if crc != zlib.crc32(payload):
        raise FormatError("payload checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(c, z, h, w)
    return SyntheticSample(Volume(data, CODE_MODALITY[code]), mask_to_labels(mask), sample_id)


def write_raw(path, sample: SyntheticSample) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_raw(sample))
    tmp.replace(path)


def read_raw(path, sample_id: int = 0) -> SyntheticSample:
    return decode_raw(Path(path).read_bytes(), sample_id)


class FileDataset:
    """Samples of one modality listed in a ``manifest.json`` written by ``gen-data``."""

    def __init__(self, root, modality: str, split: str | None = None):
        self.root = Path(root)
        manifest = json.loads((self.root / "manifest.json").read_text())
        self.rows = [r for r in manifest["samples"] if r["modality"] == modality
                     and (split is None or r.get("split", "train") == split)]
        self.modality = modality

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, i: int) -> SyntheticSample:
        row = self.rows[i]
        return read_raw(self.root / row["file"], row["id"])

    def labels(self) -> np.ndarray:
        return np.array([mask_to_labels(r["label_mask"]) for r in self.rows], dtype=np.uint8).reshape(-1, N_LABELS)
