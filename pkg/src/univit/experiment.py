"""End-to-end experiments: the anti-collapse toy and the three-stage training comparison."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import substrate as sb
from .config import RunConfig
from .evaluation import ProbeConfig, extract_frozen_embeddings, modality_robustness_report
from .objective import prediction_loss, sigreg_loss, total_loss
from .synthetic import LABELS, SyntheticDataset
from .tokenizer import CT3D, XRAY2D
from .training import AdamState, OptimConfig, adamw_step, run_stage
from .views import make_rng

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# anti-collapse toy


@dataclass(frozen=True)
class ToyConfig:
    """A 2-layer MLP embedding fixed random inputs; views are small input perturbations."""

    n_samples: int = 64
    n_views: int = 4
    n_global: int = 2
    in_dim: int = 16
    hidden: int = 32
    d: int = 8
    view_noise: float = 0.02
    n_directions: int = 16
    steps: int = 500
    lr: float = 1e-2
    seed: int = 0


@dataclass
class ToyResult:
    lam: float
    per_dim_std: np.ndarray
    variance: float
    losses: list


def _toy_forward(params: dict, x):
    h = sb.gelu(sb.add(sb.matmul(x, params["fc1.w"]), params["fc1.b"]))
    return sb.add(sb.matmul(h, params["fc2.w"]), params["fc2.b"])


def _toy_views(X: np.ndarray, cfg: ToyConfig, rng) -> np.ndarray:
    noise = rng.standard_normal((cfg.n_samples, cfg.n_views, cfg.in_dim))
    return (X[:, None, :] + cfg.view_noise * noise).astype(np.float32).reshape(-1, cfg.in_dim)


def anti_collapse_toy(lam: float, cfg: ToyConfig = ToyConfig()) -> ToyResult:
    """Train the toy with the full objective at weight ``lam``; report all-view embedding spread.

    Prediction loss alone has a constant embedding as its minimiser. The
    spread is measured on a fresh draw of views after the last step.
    """
    rng = make_rng(cfg.seed, 1)
    X = rng.standard_normal((cfg.n_samples, cfg.in_dim)).astype(np.float32)
    params = {
        "fc1.w": (rng.standard_normal((cfg.in_dim, cfg.hidden)) / np.sqrt(cfg.in_dim)).astype(np.float32),
        "fc1.b": np.zeros(cfg.hidden, np.float32),
        "fc2.w": (rng.standard_normal((cfg.hidden, cfg.d)) / np.sqrt(cfg.hidden)).astype(np.float32),
        "fc2.b": np.zeros(cfg.d, np.float32),
    }
    opt = OptimConfig(lr=cfg.lr)
    state = AdamState()
    losses = []
    for step in range(cfg.steps):
        V = _toy_views(X, cfg, make_rng(cfg.seed, 2, step))
        leaves = {k: sb.Tensor(v, requires_grad=True) for k, v in params.items()}
        E = _toy_forward(leaves, sb.Tensor(V))
        pred = prediction_loss(sb.reshape(E, (cfg.n_samples, cfg.n_views, cfg.d)), cfg.n_global)
        loss = total_loss(pred, sigreg_loss(E, cfg.n_directions, (cfg.seed, 3, step)), lam)
        sb.backward(loss)
        params, state = adamw_step(params, {k: t.grad for k, t in leaves.items()}, state, opt, step, cfg.steps)
        losses.append(float(loss.data))
    V = _toy_views(X, cfg, make_rng(cfg.seed, 9))
    E = _toy_forward({k: sb.Tensor(v) for k, v in params.items()}, sb.Tensor(V)).data
    return ToyResult(lam, E.std(axis=0), float(E.var(axis=0).mean()), losses)


# ---------------------------------------------------------------------------
# staged training comparison

STAGE_ORDER = ("stage1", "stage2", "stage3")


def _embed(params, cfg: RunConfig, datasets) -> tuple:
    parts = [extract_frozen_embeddings(params, cfg.encoder, d, cfg.views) for d in datasets]
    return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))


def probe_grid(params, cfg: RunConfig) -> dict:
    """3x2 robustness grid (probe filter x eval modality) of macro and per-label AUROC."""
    e = cfg.eval
    train = _embed(params, cfg, [SyntheticDataset(e.data_seed, XRAY2D, e.n_train_2d),
                                 SyntheticDataset(e.data_seed, CT3D, e.n_train_3d)])
    test = _embed(params, cfg, [SyntheticDataset(e.data_seed, XRAY2D, e.n_test_2d, start=10_000),
                                SyntheticDataset(e.data_seed, CT3D, e.n_test_3d, start=10_000)])
    grid = modality_robustness_report(train, test, ProbeConfig("all", e.l2, e.max_iter), e.n_boot, cfg.seed)
    return {f: {ev: r.to_dict() for ev, r in row.items()} for f, row in grid.items()}


def run_staged(cfg: RunConfig, out_dir) -> dict:
    """Train Stage 1, Stage 2 (warm-started from Stage 1) and Stage 3; probe every final checkpoint.

    Writes each stage's run directory plus ``summary.json`` under ``out_dir``.
    """
    out = Path(out_dir)
    d = cfg.data
    d2 = SyntheticDataset(d.seed, XRAY2D, d.n_2d, domain=d.domain, cache_size=d.n_2d)
    d3 = SyntheticDataset(d.seed, CT3D, d.n_3d, domain=d.domain, cache_size=d.n_3d)
    summary = {"run_config": cfg.to_dict(), "stages": {}}
    for name in STAGE_ORDER:
        init_from = str(out / "stage1" / "final.ckpt") if name == "stage2" else None
        stage = cfg.stage_config(name, init_from)
        t0 = time.perf_counter()
        res = run_stage(stage, cfg.optim, cfg.encoder, cfg.views, cfg.objective, d2,
                        d3 if stage.batch_3d else None, out / name, extra_meta={"run_config": cfg.to_dict()})
        t1 = time.perf_counter()
        grid = probe_grid(res.params, cfg)
        summary["stages"][name] = {"grid": grid, "train_seconds": t1 - t0,
                                   "eval_seconds": time.perf_counter() - t1,
                                   "final_loss": res.metrics[-1]["loss_total"] if res.metrics else None}
        log.info("%s: matched 2d %.3f, matched 3d %.3f", name, grid["2d"]["2d"]["macro"], grid["3d"]["3d"]["macro"])
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def staged_criteria(summary: dict) -> dict:
    """Check the stage-ordering, modality-robustness and probe-floor criteria on a staged summary.

    The 3D and 2D macro AUROC of a stage are those of its matched probe
    (3D-trained on 3D, 2D-trained on 2D).
    """
    g = {s: v["grid"] for s, v in summary["stages"].items()}
    m3 = {s: g[s]["3d"]["3d"]["macro"] for s in g}
    m2 = {s: g[s]["2d"]["2d"]["macro"] for s in g}
    ordering = {
        "gain_3d_stage3": m3["stage3"] - m3["stage1"],
        "gain_3d_stage2": m3["stage2"] - m3["stage1"],
        "max_change_2d": max(abs(m2[a] - m2[b]) for a in m2 for b in m2),
    }
    ordering["passed"] = (ordering["gain_3d_stage3"] >= 0.05 and ordering["gain_3d_stage2"] >= 0.05
                          and ordering["max_change_2d"] <= 0.03)
    s3 = g["stage3"]
    robust = {
        "all_gap_2d": s3["2d"]["2d"]["macro"] - s3["all"]["2d"]["macro"],
        "all_gap_3d": s3["3d"]["3d"]["macro"] - s3["all"]["3d"]["macro"],
        "mismatch_gap_2d_on_3d": s3["3d"]["3d"]["macro"] - s3["2d"]["3d"]["macro"],
        "mismatch_gap_3d_on_2d": s3["2d"]["2d"]["macro"] - s3["3d"]["2d"]["macro"],
    }
    robust["passed"] = (abs(robust["all_gap_2d"]) <= 0.03 and abs(robust["all_gap_3d"]) <= 0.03
                        and robust["mismatch_gap_2d_on_3d"] >= 0.15 and robust["mismatch_gap_3d_on_2d"] >= 0.15)
    floor = {f"{ev}/{name}": s3[ev][ev]["per_label"][name]["auroc"] for ev in ("2d", "3d") for name in LABELS}
    floor_ok = all(v is not None and v > 0.9 for v in floor.values())
    return {"stage_ordering": ordering, "modality_robustness": robust,
            "probe_floor": {"per_label": floor, "passed": floor_ok}}
