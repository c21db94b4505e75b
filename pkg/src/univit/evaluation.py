"""Linear probing on frozen embeddings, AUROC with bootstrap CIs, and PCA analyses."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit
from scipy.stats import rankdata

from .encoder import EncoderConfig, encode
from .packing import pack
from .synthetic import LABELS
from .tokenizer import CT3D, XRAY2D, tokenize
from .training import prepare_volume
from .views import ViewConfig, center_view, make_rng

MODALITY_FILTERS = {"2d": (XRAY2D,), "3d": (CT3D,), "all": (XRAY2D, CT3D)}


@dataclass(frozen=True)
class ProbeConfig:
    modality: str = "all"
    l2: float = 1e-4
    max_iter: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "modality", self.modality.lower())
        if self.modality not in MODALITY_FILTERS:
            raise ValueError(f"probe modality must be one of {sorted(MODALITY_FILTERS)}")


# ---------------------------------------------------------------------------
# frozen features


def extract_frozen_embeddings(params: dict, enc_cfg: EncoderConfig, samples, view_cfg: ViewConfig,
                              batch_size: int = 16, return_tokens: bool = False):
    """One pooled embedding per sample from its full (downsized, patch-aligned) image.

    Returns ``(E, labels, modalities)`` and, with ``return_tokens``, a list of
    per-sample ``(token_features, grid_shape)``.
    """
    frozen = {k: np.array(v, copy=True) for k, v in params.items()}
    rows, labels, mods, tokens = [], [], [], []
    samples = list(samples) if not hasattr(samples, "__getitem__") else samples
    n = len(samples)
    for lo in range(0, n, batch_size):
        seqs = []
        for i in range(lo, min(lo + batch_size, n)):
            s = samples[i]
            view = center_view(prepare_volume(s.volume, view_cfg), view_cfg.patch)
            seqs.append(tokenize(view, view_cfg.patch, enc_cfg.alpha, {"index": i}))
            labels.append(np.asarray(s.labels, dtype=np.uint8))
            mods.append(s.volume.modality)
        out = encode(pack(seqs), frozen, enc_cfg)
        rows.append(out.pooled.data.astype(np.float32))
        if return_tokens:
            b = out.boundaries
            for j in range(len(seqs)):
                tokens.append((out.token_features.data[b[j]:b[j + 1]].copy(), out.grid_shapes[j]))
    for k, v in params.items():
        if not np.array_equal(np.asarray(v), frozen[k]):
            raise RuntimeError(f"parameter {k} changed during frozen extraction")
    E = np.concatenate(rows, axis=0)
    result = (E, np.stack(labels), np.array(mods))
    return (*result, tokens) if return_tokens else result


# ---------------------------------------------------------------------------
# linear probe


@dataclass
class LinearProbe:
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray  # d x L
    bias: np.ndarray  # L
    evaluable: np.ndarray  # L bools
    config: dict = field(default_factory=dict)

    def decision(self, E: np.ndarray) -> np.ndarray:
        Z = (np.asarray(E, dtype=np.float64) - self.mean) / self.scale
        return Z @ self.weights + self.bias


def fit_linear_probe(E: np.ndarray, labels: np.ndarray, cfg: ProbeConfig) -> LinearProbe:
    """One-vs-rest L2-penalised logistic regression, fit to convergence with L-BFGS.

    Minimises ``mean(log(1 + exp(z)) - y z) + l2/2 |w|^2`` per label on
    standardised features (training mean/std); the bias is not penalised.
    Labels whose training column has a single class are marked unevaluable.
    """
    E = np.asarray(E, dtype=np.float64)
    Y = np.asarray(labels, dtype=np.float64).reshape(len(E), -1)
    if len(E) < 2:
        raise ValueError("need at least two training samples")
    mean = E.mean(axis=0)
    scale = E.std(axis=0)
    scale[scale < 1e-8] = 1.0
    Z = (E - mean) / scale
    n, d = Z.shape
    L = Y.shape[1]
    evaluable = np.array([0 < Y[:, j].sum() < n for j in range(L)])

    # the labels are independent problems; one flat vector keeps a single optimiser call
    def objective(theta):
        W, b = theta[: d * L].reshape(d, L), theta[d * L:]
        logits = Z @ W + b
        loss = (np.logaddexp(0.0, logits) - Y * logits).sum() / n + 0.5 * cfg.l2 * (W * W).sum()
        err = (expit(logits) - Y) / n
        return loss, np.concatenate([(Z.T @ err + cfg.l2 * W).ravel(), err.sum(axis=0)])

    res = minimize(objective, np.zeros(d * L + L), jac=True, method="L-BFGS-B",
                   options={"maxiter": cfg.max_iter, "gtol": 1e-8})
    W, b = res.x[: d * L].reshape(d, L).copy(), res.x[d * L:].copy()
    W[:, ~evaluable] = 0.0
    return LinearProbe(mean, scale, W, b, evaluable, asdict(cfg))


# ---------------------------------------------------------------------------
# AUROC


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: (concordant + 0.5 * tied) / (n_pos * n_neg); NaN for one class.

    Computed from average ranks, which count a tied pair as half concordant.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = rankdata(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auroc_bruteforce(scores, labels) -> float:
    """Explicit enumeration of all positive-negative pairs (test oracle)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        return float("nan")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg)))


def bootstrap_aurocs(scores, labels, n_boot: int = 1000, seed: int = 0) -> np.ndarray:
    """AUROCs of ``n_boot`` sample-level resamples; single-class resamples are redrawn."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if y.all() or not y.any():
        raise ValueError("bootstrap needs both classes")
    rng = make_rng(seed, 505)
    n = len(s)
    out = np.empty(n_boot)
    k = 0
    while k < n_boot:
        idx = rng.integers(0, n, n)
        yy = y[idx]
        if yy.all() or not yy.any():
            continue
        out[k] = auroc(s[idx], yy)
        k += 1
    return out


def bootstrap_ci(scores, labels, n_boot: int = 1000, seed: int = 0) -> tuple[float, float]:
    vals = bootstrap_aurocs(scores, labels, n_boot, seed)
    return float(np.percentile(vals, 2.5)), float(np.percentile(vals, 97.5))


def macro_bootstrap_ci(score_mat, label_mat, n_boot: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Percentile CI of the macro AUROC; labels missing a class in a resample are skipped."""
    S = np.asarray(score_mat, dtype=np.float64)
    Y = np.asarray(label_mat).astype(bool)
    cols = [j for j in range(Y.shape[1]) if 0 < Y[:, j].sum() < len(Y)]
    if not cols:
        return float("nan"), float("nan")
    rng = make_rng(seed, 606)
    vals = []
    n = len(S)
    while len(vals) < n_boot:
        idx = rng.integers(0, n, n)
        a = [auroc(S[idx, j], Y[idx, j]) for j in cols]
        a = [x for x in a if not math.isnan(x)]
        if a:
            vals.append(float(np.mean(a)))
    return float(np.percentile(vals, 2.5)), float(np.percentile(vals, 97.5))


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    per_label: dict
    macro: float
    macro_ci: tuple
    metadata: dict

    def to_dict(self) -> dict:
        return {"per_label": self.per_label, "macro": self.macro, "macro_ci": list(self.macro_ci),
                "metadata": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def evaluate_probe(probe: LinearProbe, E: np.ndarray, labels: np.ndarray, n_boot: int = 1000,
                   seed: int = 0, metadata: dict | None = None) -> EvalReport:
    scores = probe.decision(E)
    per_label = {}
    aucs = []
    for j, name in enumerate(LABELS[: labels.shape[1]]):
        y = labels[:, j]
        if not probe.evaluable[j] or y.all() or not y.any():
            per_label[name] = {"auroc": None, "ci": None, "status": "unevaluable"}
            continue
        a = auroc(scores[:, j], y)
        lo, hi = bootstrap_ci(scores[:, j], y, n_boot, seed + j)
        per_label[name] = {"auroc": a, "ci": [lo, hi]}
        aucs.append(a)
    macro = float(np.mean(aucs)) if aucs else float("nan")
    ci = macro_bootstrap_ci(scores, labels, n_boot, seed) if aucs else (float("nan"), float("nan"))
    return EvalReport(per_label, macro, ci, dict(metadata or {}))


def select(E, labels, mods, modality_filter: str):
    keep = np.isin(mods, MODALITY_FILTERS[modality_filter])
    return E[keep], labels[keep]


def modality_robustness_report(train: tuple, test: tuple, probe_cfg: ProbeConfig = ProbeConfig(),
                               n_boot: int = 200, seed: int = 0) -> dict:
    """Fit 2D-only, 3D-only and ALL probes; evaluate each on the 2D and 3D test sets.

    ``train`` and ``test`` are ``(E, labels, modalities)`` triples. Returns
    ``{probe_filter: {eval_modality: EvalReport}}``.
    """
    grid = {}
    for filt in ("2d", "3d", "all"):
        Etr, Ytr = select(*train, filt)
        probe = fit_linear_probe(Etr, Ytr, dataclasses.replace(probe_cfg, modality=filt))
        grid[filt] = {}
        for ev in ("2d", "3d"):
            Ete, Yte = select(*test, ev)
            grid[filt][ev] = evaluate_probe(probe, Ete, Yte, n_boot, seed,
                                            {"probe_filter": filt, "eval_modality": ev})
    return grid


def domain_adaptation_report(source_train: tuple, target_train: tuple, target_test: tuple,
                             probe_cfg: ProbeConfig = ProbeConfig(), n_boot: int = 200, seed: int = 0) -> dict:
    """Probe fitted on the source domain vs. a probe refitted on the shifted target domain.

    Each argument is an ``(E, labels, modalities)`` triple; both probes are
    scored on ``target_test`` with the filter in ``probe_cfg``.
    """
    filt = probe_cfg.modality
    Ete, Yte = select(*target_test, filt)
    out = {}
    for name, data in (("source_probe", source_train), ("refit_probe", target_train)):
        probe = fit_linear_probe(*select(*data, filt), probe_cfg)
        out[name] = evaluate_probe(probe, Ete, Yte, n_boot, seed, {"probe": name, "probe_filter": filt})
    return out


def robustness_table(grid: dict) -> str:
    lines = ["probe\\eval      2d       3d"]
    for filt, row in grid.items():
        lines.append(f"{filt:<10} " + " ".join(f"{row[ev].macro:8.3f}" for ev in ("2d", "3d")))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# PCA


@dataclass
class PCAResult:
    mean: np.ndarray
    components: np.ndarray  # k x d, orthonormal rows
    explained_variance: np.ndarray
    projections: np.ndarray
    total_variance: float

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T


def embedding_pca(E: np.ndarray, k: int) -> PCAResult:
    """Top-k principal components from the eigendecomposition of the centred covariance."""
    E = np.asarray(E, dtype=np.float64)
    n, d = E.shape
    if not 1 <= k < n:
        raise ValueError(f"need 1 <= k < N, got k={k}, N={n}")
    k = min(k, d)
    mean = E.mean(axis=0)
    X = E - mean
    cov = X.T @ X / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    # deterministic sign: largest-magnitude loading positive
    signs = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(d)])
    evecs = evecs * np.where(signs == 0, 1.0, signs)
    comps = evecs[:, :k].T
    return PCAResult(mean, comps, evals[:k], X @ comps.T, float(evals.sum()))


def pca_probe_report(E_train, Y_train, E_test, Y_test, k: int = 10,
                     probe_cfg: ProbeConfig = ProbeConfig()) -> dict:
    """Logistic regression on PCA-projected embeddings with per-PC coefficients."""
    pca = embedding_pca(E_train, k)
    probe = fit_linear_probe(pca.transform(E_train), Y_train, probe_cfg)
    scores = probe.decision(pca.transform(E_test))
    return {
        "explained_variance": pca.explained_variance.tolist(),
        "auroc": {name: auroc(scores[:, j], Y_test[:, j]) for j, name in enumerate(LABELS)},
        "coefficients": {name: probe.weights[:, j].tolist() for j, name in enumerate(LABELS)},
    }


def fit_token_pca(token_sets, k: int = 3) -> PCAResult:
    feats = np.concatenate([t for t, _ in token_sets], axis=0)
    return embedding_pca(feats, k)


def patch_pca_map(token_features: np.ndarray, grid_shape: tuple, pca: PCAResult) -> np.ndarray:
    """Project tokens on the top-3 components; returns a (3, G_Z, G_H, G_W) array in [0, 1]."""
    gz, gh, gw = grid_shape
    if token_features.shape[0] != gz * gh * gw:
        raise ValueError(f"{token_features.shape[0]} tokens do not fill grid {grid_shape}")
    proj = pca.transform(token_features)[:, :3]
    out = np.zeros((proj.shape[1], gz, gh, gw))
    for c in range(proj.shape[1]):
        v = proj[:, c]
        lo, hi = v.min(), v.max()
        scaled = (v - lo) / (hi - lo) if hi - lo > 1e-12 else np.zeros_like(v)
        out[c] = scaled.reshape(gz, gh, gw)
    return out


def write_pgm(path, img: np.ndarray) -> None:
    """Binary 8-bit portable graymap from an array in [0, 1]."""
    a = np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = a.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(f"P5\n{w} {h}\n255\n".encode() + a.tobytes())
    tmp.replace(path)


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    parts = buf.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)
