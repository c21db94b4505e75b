"""Pre-norm transformer over packed tokens with 3D RoPE attention and mean pooling."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import substrate as sb
from .packing import PackedBatch, packed_attention
from .rope3d import RopeTable, apply_rope, build_rope_table
from .substrate import ShapeError, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 4
    d: int = 96
    n_heads: int = 2
    mlp_ratio: int = 4
    patch: int = 14
    channels: int = 1
    alpha: float = 128.0
    rope_base: float = 10000.0
    pooling: str = "mean"

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.head_dim % 6:
            raise ValueError(f"head_dim={self.head_dim} must be divisible by 6")
        if self.patch < 1 or self.depth < 0:
            raise ValueError("patch must be >= 1 and depth >= 0")
        if self.pooling != "mean":
            raise ValueError(f"unsupported pooling {self.pooling!r}")

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch**3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EncoderOutput:
    pooled: Tensor
    token_features: Tensor
    coords: np.ndarray
    boundaries: np.ndarray
    sample_meta: list
    grid_shapes: list


def param_shapes(cfg: EncoderConfig) -> dict[str, tuple]:
    d, h = cfg.d, cfg.d * cfg.mlp_ratio
    shapes = {"patch_embed.w": (cfg.patch_dim, d), "patch_embed.b": (d,)}
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.qkv.w": (d, 3 * d), p + "attn.qkv.b": (3 * d,),
            p + "attn.out.w": (d, d), p + "attn.out.b": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.fc1.w": (d, h), p + "mlp.fc1.b": (h,),
            p + "mlp.fc2.w": (h, d), p + "mlp.fc2.b": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,)})
    return shapes


def is_layernorm_param(name: str) -> bool:
    return ".ln" in name or name.startswith("ln_")


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) truncated to +-2 std by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return (out * std).astype(np.float32)


def init_params(cfg: EncoderConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.Generator(np.random.Philox(seed))
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".w"):
            params[name] = trunc_normal(rng, shape)
        elif name.endswith(".g"):
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            params[name] = np.zeros(shape, dtype=np.float32)
    return params


def count_params(cfg: EncoderConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def check_params(params: dict, cfg: EncoderConfig) -> None:
    expected = param_shapes(cfg)
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise ShapeError(f"params do not match config: missing={missing[:5]} extra={extra[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(params[name])) != shape:
            raise ShapeError(f"param {name} has shape {np.shape(params[name])}, config wants {shape}")


def _as_leaves(params: dict) -> dict[str, Tensor]:
    return {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}


def _block(x: Tensor, p: dict, prefix: str, cfg: EncoderConfig, coords, boundaries, table: RopeTable) -> Tensor:
    T, d, H, hd = x.shape[0], cfg.d, cfg.n_heads, cfg.head_dim
    h = sb.layer_norm(x, p[prefix + "ln1.g"], p[prefix + "ln1.b"])
    qkv = sb.add(sb.matmul(h, p[prefix + "attn.qkv.w"]), p[prefix + "attn.qkv.b"])
    qkv = sb.reshape(qkv, (T, 3, H, hd))
    q = apply_rope(sb.slice_(qkv, (slice(None), 0)), coords, table)
    k = apply_rope(sb.slice_(qkv, (slice(None), 1)), coords, table)
    v = sb.slice_(qkv, (slice(None), 2))
    a = sb.reshape(packed_attention(q, k, v, boundaries), (T, d))
    x = sb.add(x, sb.add(sb.matmul(a, p[prefix + "attn.out.w"]), p[prefix + "attn.out.b"]))
    h = sb.layer_norm(x, p[prefix + "ln2.g"], p[prefix + "ln2.b"])
    h = sb.gelu(sb.add(sb.matmul(h, p[prefix + "mlp.fc1.w"]), p[prefix + "mlp.fc1.b"]))
    return sb.add(x, sb.add(sb.matmul(h, p[prefix + "mlp.fc2.w"]), p[prefix + "mlp.fc2.b"]))


def encode(batch: PackedBatch, params: dict, cfg: EncoderConfig) -> EncoderOutput:
    """Run the encoder on a packed batch.

    ``params`` may hold numpy arrays or grad-tracking Tensors; in the latter
    case the returned tensors are connected to them for backpropagation.
    """
    check_params(params, cfg)
    if batch.tokens.shape[1] != cfg.patch_dim:
        raise ShapeError(f"token width {batch.tokens.shape[1]} != patch dim {cfg.patch_dim}")
    p = _as_leaves(params)
    table = build_rope_table(cfg.head_dim, cfg.rope_base)
    x = sb.add(sb.matmul(Tensor(batch.tokens), p["patch_embed.w"]), p["patch_embed.b"])
    for i in range(cfg.depth):
        x = _block(x, p, f"blocks.{i}.", cfg, batch.coords, batch.boundaries, table)
    x = sb.layer_norm(x, p["ln_f.g"], p["ln_f.b"])
    pooled = sb.segment_mean(x, batch.boundaries)
    return EncoderOutput(pooled, x, batch.coords, batch.boundaries, batch.sample_meta, batch.grid_shapes)
