"""Pack variable-length token sequences and attend within each sample only."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .substrate import ShapeError, Tensor, custom_op
from .tokenizer import TokenSequence


@dataclass
class PackedBatch:
    tokens: np.ndarray
    boundaries: np.ndarray
    coords: np.ndarray
    sample_meta: list = field(default_factory=list)
    grid_shapes: list = field(default_factory=list)

    def __post_init__(self):
        b = self.boundaries
        if b[0] != 0 or b[-1] != self.tokens.shape[0] or np.any(np.diff(b) <= 0):
            raise ShapeError(f"invalid boundaries {b.tolist()} for {self.tokens.shape[0]} tokens")
        if len(self.sample_meta) != len(b) - 1:
            raise ShapeError("sample_meta length must equal number of segments")

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def lengths(self) -> np.ndarray:
        return np.diff(self.boundaries)


def pack(sequences: list[TokenSequence]) -> PackedBatch:
    if not sequences:
        raise ValueError("pack: empty sequence list")
    width = sequences[0].tokens.shape[1]
    for i, s in enumerate(sequences):
        if len(s) == 0:
            raise ValueError(f"pack: sequence {i} has zero length")
        if s.tokens.shape[1] != width:
            raise ShapeError(f"pack: sequence {i} has width {s.tokens.shape[1]}, expected {width}")
    boundaries = np.concatenate([[0], np.cumsum([len(s) for s in sequences])]).astype(np.int64)
    return PackedBatch(
        tokens=np.concatenate([s.tokens for s in sequences], axis=0),
        boundaries=boundaries,
        coords=np.concatenate([s.coords for s in sequences], axis=0),
        sample_meta=[dict(s.meta) for s in sequences],
        grid_shapes=[tuple(s.grid_shape) for s in sequences],
    )


def unpack(batch: PackedBatch) -> list[TokenSequence]:
    b = batch.boundaries
    return [
        TokenSequence(batch.tokens[b[i]:b[i + 1]], batch.coords[b[i]:b[i + 1]],
                      batch.grid_shapes[i], dict(batch.sample_meta[i]))
        for i in range(batch.n_segments)
    ]


def _check_boundaries(boundaries, n_tokens: int) -> np.ndarray:
    b = np.asarray(boundaries, dtype=np.int64)
    if b.ndim != 1 or len(b) < 2 or b[0] != 0:
        raise ShapeError(f"boundaries must start at 0 with at least one segment, got {b.tolist()}")
    if b[-1] > n_tokens:
        raise ShapeError(f"boundary {int(b[-1])} exceeds token count {n_tokens}")
    if b[-1] != n_tokens or np.any(np.diff(b) <= 0):
        raise ShapeError(f"boundaries {b.tolist()} do not tile {n_tokens} tokens")
    return b


def _segment_groups(b: np.ndarray) -> dict:
    """Group segment starts by length so equal-length segments run as one batched matmul."""
    groups: dict[int, list[int]] = {}
    for s, e in zip(b[:-1], b[1:]):
        groups.setdefault(int(e - s), []).append(int(s))
    return groups


def packed_attention(q: Tensor, k: Tensor, v: Tensor, boundaries) -> Tensor:
    """softmax(q k^T / sqrt(head_dim)) v evaluated separately inside each segment.

    q, k, v have shape (total_tokens, n_heads, head_dim).
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"packed_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    b = _check_boundaries(boundaries, q.shape[0])
    scale = q.dtype.type(1.0 / np.sqrt(q.shape[-1]))
    out = np.empty_like(q.data)
    saved = []
    for length, starts in _segment_groups(b).items():
        idx = (np.asarray(starts)[:, None] + np.arange(length)[None, :]).ravel()
        # n_seg x H x L x D
        qs = q.data[idx].reshape(len(starts), length, *q.shape[1:]).transpose(0, 2, 1, 3)
        ks = k.data[idx].reshape(len(starts), length, *q.shape[1:]).transpose(0, 2, 1, 3)
        vs = v.data[idx].reshape(len(starts), length, *q.shape[1:]).transpose(0, 2, 1, 3)
        s = (qs @ ks.transpose(0, 1, 3, 2)) * scale
        s -= s.max(axis=-1, keepdims=True)
        p = np.exp(s)
        p /= p.sum(axis=-1, keepdims=True)
        o = p @ vs
        out[idx] = o.transpose(0, 2, 1, 3).reshape(len(idx), *q.shape[1:])
        saved.append((idx, length, len(starts), qs, ks, vs, p))

    def bw(g):
        gq, gk, gv = np.empty_like(q.data), np.empty_like(k.data), np.empty_like(v.data)
        for idx, length, n, qs, ks, vs, p in saved:
            go = g[idx].reshape(n, length, *q.shape[1:]).transpose(0, 2, 1, 3)
            gvs = p.transpose(0, 1, 3, 2) @ go
            gp = go @ vs.transpose(0, 1, 3, 2)
            gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) * scale
            gqs = gs @ ks
            gks = gs.transpose(0, 1, 3, 2) @ qs
            for dst, src in ((gq, gqs), (gk, gks), (gv, gvs)):
                dst[idx] = src.transpose(0, 2, 1, 3).reshape(len(idx), *q.shape[1:])
        return gq, gk, gv

    return custom_op("packed_attention", out, (q, k, v), bw)


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Reference single-sample attention on (L, H, D) arrays, in float64."""
    q, k, v = (np.asarray(a, dtype=np.float64).transpose(1, 0, 2) for a in (q, k, v))
    s = q @ k.transpose(0, 2, 1) / np.sqrt(q.shape[-1])
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    return (p @ v).transpose(1, 0, 2)


def padded_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray, boundaries) -> np.ndarray:
    """Pad-to-max baseline: one (n, H, Lmax, Lmax) batch with a key-padding mask."""
    b = _check_boundaries(boundaries, q.shape[0])
    lengths = np.diff(b)
    n, lmax, H, D = len(lengths), int(lengths.max()), q.shape[1], q.shape[2]
    pad = lambda a: np.zeros((n, lmax, H, D), dtype=a.dtype)
    qp, kp, vp = pad(q), pad(k), pad(v)
    valid = np.arange(lmax)[None, :] < lengths[:, None]
    for arr, src in ((qp, q), (kp, k), (vp, v)):
        arr[valid] = src
    qp, kp, vp = (a.transpose(0, 2, 1, 3) for a in (qp, kp, vp))
    s = qp @ kp.transpose(0, 1, 3, 2) / np.sqrt(D).astype(q.dtype)
    s = np.where(valid[:, None, None, :], s, -np.inf)
    s -= s.max(axis=-1, keepdims=True)
    p = np.exp(s)
    p /= p.sum(axis=-1, keepdims=True)
    o = (p @ vp).transpose(0, 2, 1, 3)
    return o[valid]


def padding_overhead(lengths) -> float:
    lengths = np.asarray(lengths)
    if lengths.size == 0:
        raise ValueError("padding_overhead: no lengths")
    return float(len(lengths) * lengths.max() / lengths.sum())
