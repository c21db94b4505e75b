"""Staged self-supervised training: batch stream, AdamW with cosine decay, stage loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import substrate as sb
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderConfig, encode, init_params, is_layernorm_param
from .objective import ObjectiveConfig, prediction_loss, sigreg_loss, total_loss
from .packing import PackedBatch, pack
from .synthetic import MODALITY_CODE
from .tokenizer import CT3D, XRAY2D, tokenize
from .views import ViewConfig, downsize_long_side, make_rng, normalize, sample_views

log = logging.getLogger(__name__)

STAGE1 = "stage1_2d_only"
STAGE2 = "stage2_curriculum"
STAGE3 = "stage3_native_joint"
STAGES = (STAGE1, STAGE2, STAGE3)
STAGE_ALIASES = {"stage1": STAGE1, "stage2": STAGE2, "stage3": STAGE3}


class NumericAbort(RuntimeError):
    def __init__(self, step: int, msg: str):
        super().__init__(f"step {step}: {msg}")
        self.step = step


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    warmup_steps: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need lr > 0 and weight_decay >= 0")
        if self.warmup_steps != 0:
            raise ValueError("warmup is not supported; the schedule is pure cosine decay")


@dataclass(frozen=True)
class StageConfig:
    stage: str = STAGE3
    init: str = "random"
    steps: int = 300
    batch_2d: int = 12
    batch_3d: int = 4
    seed: int = 0
    init_from: str | None = None

    def __post_init__(self):
        stage = STAGE_ALIASES.get(self.stage, self.stage)
        object.__setattr__(self, "stage", stage)
        if stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.init not in ("random", "from_checkpoint"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.steps < 0 or self.batch_2d < 0 or self.batch_3d < 0:
            raise ValueError("steps and batch sizes must be non-negative")
        if stage == STAGE1 and self.batch_3d != 0:
            raise ValueError("stage1 is 2D-only: batch_3d must be 0")
        if stage == STAGE2 and self.init != "from_checkpoint":
            raise ValueError("stage2 must initialise from a checkpoint")
        if stage == STAGE3 and (self.init != "random" or self.batch_2d == 0 or self.batch_3d == 0):
            raise ValueError("stage3 trains from scratch on a mixed 2D/3D stream")
        if self.batch_2d + self.batch_3d == 0:
            raise ValueError("empty batch")


# ---------------------------------------------------------------------------
# optimiser


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= max(total_steps, 0):
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, cfg: OptimConfig, step: int,
               total_steps: int) -> tuple[dict, AdamState]:
    """One decoupled-weight-decay Adam update at learning rate ``cosine_lr(step, total_steps)``.

    Layernorm scales and shifts are not decayed. Returns new dicts; inputs are
    not mutated.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericAbort(step, f"non-finite gradient in {name}")
    lr = np.float32(cosine_lr(step, total_steps, cfg.lr))
    t = state.t + 1
    b1, b2 = np.float32(cfg.beta1), np.float32(cfg.beta2)
    # complements in float64 first: 1 - float32(0.9) is not float32(0.1)
    a1, a2 = np.float32(1.0 - cfg.beta1), np.float32(1.0 - cfg.beta2)
    c1 = np.float32(1.0 - cfg.beta1**t)
    c2 = np.float32(1.0 - cfg.beta2**t)
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = b1 * state.m.get(name, np.zeros_like(p)) + a1 * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + a2 * g * g
        update = (m / c1) / (np.sqrt(v / c2) + np.float32(cfg.eps))
        if not is_layernorm_param(name):
            update = update + np.float32(cfg.weight_decay) * p
        new_p[name] = (p - lr * update).astype(np.float32)
        new_m[name], new_v[name] = m.astype(np.float32), v.astype(np.float32)
    return new_p, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# data stream


@dataclass
class Batch:
    step: int
    viewsets: list
    packed: PackedBatch
    n_2d: int
    n_3d: int
    n_views: int
    n_global: int


def draw_indices(n: int, batch: int, step: int, seed: int, code: int) -> list[tuple[int, int]]:
    """(index, epoch) pairs for ``step``; each epoch walks a seed-determined permutation."""
    out = []
    perms: dict[int, np.ndarray] = {}
    for j in range(step * batch, (step + 1) * batch):
        epoch, pos = divmod(j, n)
        if epoch not in perms:
            perms[epoch] = make_rng(seed, 101, code, epoch).permutation(n)
        out.append((int(perms[epoch][pos]), epoch))
    return out


def prepare_volume(volume, view_cfg: ViewConfig):
    v = normalize(volume)
    target = view_cfg.long_side_2d if v.modality == XRAY2D else view_cfg.long_side_3d
    return downsize_long_side(v, target, view_cfg.patch)


def make_batch(step: int, data2d, data3d, batch_2d: int, batch_3d: int, seed: int,
               view_cfg: ViewConfig, alpha: float = 128.0) -> Batch:
    """All views of ``batch_2d`` 2D and ``batch_3d`` 3D samples packed into one sequence."""
    if batch_2d + batch_3d == 0:
        raise ValueError("batch_2d and batch_3d are both 0")
    seqs, viewsets = [], []
    for modality, data, count in ((XRAY2D, data2d, batch_2d), (CT3D, data3d, batch_3d)):
        if count == 0:
            continue
        if data is None or len(data) == 0:
            raise ValueError(f"no {modality} data for a batch requesting {count} samples")
        code = MODALITY_CODE[modality]
        for idx, epoch in draw_indices(len(data), count, step, seed, code):
            sample = data[idx]
            vol = prepare_volume(sample.volume, view_cfg)
            vs = sample_views(vol, view_cfg, seed, sample_id=code * 1_000_000_007 + idx, epoch=epoch)
            vs.labels = sample.labels
            vs.meta = {"modality": modality, "index": idx, "epoch": epoch}
            k = len(viewsets)
            for view, role in zip(vs.views, vs.roles):
                seqs.append(tokenize(view, view_cfg.patch, alpha,
                                     {"sample": k, "role": role, "index": idx}))
            viewsets.append(vs)
    return Batch(step, viewsets, pack(seqs), batch_2d, batch_3d, view_cfg.n_views, view_cfg.n_global)


def mixed_batch_iterator(data2d, data3d, batch_2d: int, batch_3d: int, seed: int,
                         view_cfg: ViewConfig, alpha: float = 128.0, start: int = 0,
                         stop: int | None = None) -> Iterator[Batch]:
    step = start
    while stop is None or step < stop:
        yield make_batch(step, data2d, data3d, batch_2d, batch_3d, seed, view_cfg, alpha)
        step += 1


# ---------------------------------------------------------------------------
# losses and the stage loop


def compute_losses(params: dict, batch: Batch, enc_cfg: EncoderConfig, obj_cfg: ObjectiveConfig,
                   dir_seed: tuple) -> dict:
    out = encode(batch.packed, params, enc_cfg)
    n_samples = len(batch.viewsets)
    emb = sb.reshape(out.pooled, (n_samples, batch.n_views, enc_cfg.d))
    pred = prediction_loss(emb, batch.n_global)
    sig = sigreg_loss(out.pooled, obj_cfg.n_directions, dir_seed)
    losses = {"pred": pred, "sigreg": sig, "total": total_loss(pred, sig, obj_cfg.lam)}
    # per-modality prediction loss, reported only
    for modality, lo, hi in ((XRAY2D, 0, batch.n_2d), (CT3D, batch.n_2d, n_samples)):
        if hi > lo:
            e = emb.data[lo:hi]
            mu = e[:, :batch.n_global].mean(axis=1, keepdims=True)
            losses[f"pred_{'2d' if modality == XRAY2D else '3d'}"] = float(((e - mu) ** 2).sum(-1).mean())
    return losses


@dataclass
class StageResult:
    params: dict
    state: AdamState
    metrics: list
    step: int
    consumed: dict


def _meta(stage: StageConfig, optim: OptimConfig, enc_cfg: EncoderConfig, view_cfg: ViewConfig,
          obj_cfg: ObjectiveConfig, step: int, extra: dict | None = None) -> dict:
    meta = {
        "step": step,
        "stage": asdict(stage),
        "optim": asdict(optim),
        "encoder": enc_cfg.to_dict(),
        "views": asdict(view_cfg),
        "objective": asdict(obj_cfg),
        "seeds": {"stage": stage.seed},
    }
    meta.update(extra or {})
    return meta


def checkpoint_arrays(params: dict, state: AdamState) -> dict:
    arrays = dict(params)
    arrays.update({f"adam.m/{k}": v for k, v in state.m.items()})
    arrays.update({f"adam.v/{k}": v for k, v in state.v.items()})
    return arrays


def split_checkpoint(arrays: dict) -> tuple[dict, AdamState]:
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    m = {k[len("adam.m/"):]: v for k, v in arrays.items() if k.startswith("adam.m/")}
    v = {k[len("adam.v/"):]: v for k, v in arrays.items() if k.startswith("adam.v/")}
    return params, AdamState(m, v, 0)


def load_params(path, enc_cfg: EncoderConfig) -> tuple[dict, dict]:
    arrays, meta = load_checkpoint(path, enc_cfg.to_dict())
    params, _ = split_checkpoint(arrays)
    return params, meta


def format_metrics(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, separators=(",", ":"))


def run_stage(stage: StageConfig, optim: OptimConfig, enc_cfg: EncoderConfig, view_cfg: ViewConfig,
              obj_cfg: ObjectiveConfig, data2d=None, data3d=None, out_dir=None, resume=None,
              ckpt_every: int = 0, stop_after: int | None = None, extra_meta: dict | None = None) -> StageResult:
    """Train one stage; optionally write ``metrics.jsonl`` and ``final.ckpt`` to ``out_dir``.

    ``resume`` is a checkpoint written by an interrupted run of the same stage.
    ``stop_after`` halts early (for interruption tests) while keeping the
    schedule of the full ``stage.steps``.
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    cfg_dict = enc_cfg.to_dict()
    metrics: list[dict] = []
    start = 0
    if resume is not None:
        arrays, meta = load_checkpoint(resume, cfg_dict)
        params, state = split_checkpoint(arrays)
        start = int(meta["step"])
        state.t = int(meta.get("adam_t", start))
        if out_dir is not None and (out_dir / "metrics.jsonl").exists():
            lines = (out_dir / "metrics.jsonl").read_text().splitlines()[:start]
            metrics = [json.loads(x) for x in lines]
    elif stage.init == "from_checkpoint":
        if not stage.init_from or not Path(stage.init_from).exists():
            raise FileNotFoundError(f"init checkpoint {stage.init_from!r} not found")
        params, _ = load_params(stage.init_from, enc_cfg)
        state = AdamState()
    else:
        params = init_params(enc_cfg, stage.seed)
        state = AdamState()

    consumed = {XRAY2D: 0, CT3D: 0}
    for rec in metrics:
        consumed[XRAY2D] += rec["n_2d"]
        consumed[CT3D] += rec["n_3d"]
    end = stage.steps if stop_after is None else min(stage.steps, stop_after)

    def save(name, p, s, step):
        if out_dir is not None:
            save_checkpoint(out_dir / name, checkpoint_arrays(p, s), cfg_dict,
                            _meta(stage, optim, enc_cfg, view_cfg, obj_cfg, step,
                                  {"adam_t": s.t, **(extra_meta or {})}))

    for step in range(start, end):
        batch = make_batch(step, data2d, data3d, stage.batch_2d, stage.batch_3d, stage.seed,
                           view_cfg, enc_cfg.alpha)
        leaves = {k: sb.Tensor(v, requires_grad=True) for k, v in params.items()}
        losses = compute_losses(leaves, batch, enc_cfg, obj_cfg, (stage.seed, 202, step))
        total = losses["total"]
        if not np.isfinite(total.data).all():
            save("last_good.ckpt", params, state, step)
            raise NumericAbort(step, "non-finite loss")
        sb.backward(total)
        grads = {k: t.grad for k, t in leaves.items()}
        try:
            params, state = adamw_step(params, grads, state, optim, step, stage.steps)
        except NumericAbort:
            save("last_good.ckpt", params, state, step)
            raise
        consumed[XRAY2D] += batch.n_2d
        consumed[CT3D] += batch.n_3d
        rec = {
            "step": step,
            "lr": cosine_lr(step, stage.steps, optim.lr),
            "loss_pred": float(losses["pred"].data),
            "loss_sigreg": float(losses["sigreg"].data),
            "loss_total": float(total.data),
            "n_2d": batch.n_2d,
            "n_3d": batch.n_3d,
        }
        for key in ("pred_2d", "pred_3d"):
            if key in losses:
                rec[f"loss_{key}"] = losses[key]
        metrics.append(rec)
        if step % 25 == 0:
            log.info("%s step %d total=%.5f pred=%.5f sigreg=%.5f", stage.stage, step,
                     rec["loss_total"], rec["loss_pred"], rec["loss_sigreg"])
        if ckpt_every and (step + 1) % ckpt_every == 0 and step + 1 < end:
            save("last_good.ckpt", params, state, step + 1)

    final_step = max(end, start)
    if out_dir is not None:
        tmp = out_dir / "metrics.jsonl.tmp"
        tmp.write_text("".join(format_metrics(r) + "\n" for r in metrics))
        tmp.replace(out_dir / "metrics.jsonl")
        save("final.ckpt" if end == stage.steps else "last_good.ckpt", params, state, final_step)
    return StageResult(params, state, metrics, final_step, consumed)
