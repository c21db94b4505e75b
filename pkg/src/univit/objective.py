"""Multi-view centroid prediction loss plus SIGReg (Epps-Pulley on random 1D projections)."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import substrate as sb
from .substrate import ShapeError, Tensor, custom_op
from .views import make_rng

SQRT2 = math.sqrt(2.0)
INV_SQRT3 = 1.0 / math.sqrt(3.0)


@dataclass(frozen=True)
class ObjectiveConfig:
    lam: float = 0.025
    n_directions: int = 64

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.n_directions < 1:
            raise ValueError("need at least one projection direction")


def prediction_loss(emb: Tensor, n_global: int) -> Tensor:
    """Mean squared distance of every view to the centroid of the global views.

    ``emb`` is (batch, views, d) or (views, d), global views first. The
    centroid is not detached.
    """
    if n_global < 1:
        raise ValueError("prediction_loss needs at least one global view")
    if emb.ndim == 2:
        emb = sb.reshape(emb, (1, *emb.shape))
    if emb.shape[1] < n_global:
        raise ShapeError(f"{emb.shape[1]} views but n_global={n_global}")
    mu = sb.mean_reduce(sb.slice_(emb, (slice(None), slice(0, n_global))), axis=1, keepdims=True)
    diff = sb.add(emb, sb.mul(mu, -1.0))
    per_view = sb.sum_reduce(sb.square(diff), axis=2)
    return sb.mean_reduce(per_view)


def _ep_columns(x: np.ndarray):
    # x: N x M; one statistic per column
    n = x.shape[0]
    diff = x[:, None, :] - x[None, :, :]
    kern = np.exp(-0.5 * diff * diff)
    gauss = np.exp(-0.25 * x * x)
    t = kern.sum(axis=(0, 1)) / n - SQRT2 * gauss.sum(axis=0) + n * INV_SQRT3
    return t, diff, kern, gauss


def ep_statistic(x) -> Tensor:
    """Epps-Pulley statistic against N(0, 1), one value per column.

    T = (1/N) sum_jk exp(-(x_j - x_k)^2 / 2) - sqrt(2) sum_j exp(-x_j^2 / 4) + N / sqrt(3),
    i.e. N times the N(0,1)-weighted squared distance between the empirical
    and standard normal characteristic functions. A 1-D input gives a scalar.
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if not np.isfinite(x.data).all():
        raise ValueError("ep_statistic: non-finite input")
    squeeze = x.ndim == 1
    # the three sums cancel to a small value, so accumulate in float64 whatever the input dtype
    xd = (x.data[:, None] if squeeze else x.data).astype(np.float64)
    n = xd.shape[0]
    t, diff, kern, gauss = _ep_columns(xd)

    def bw(g):
        g = np.reshape(g, (1, -1))
        dx = (-2.0 / n) * (kern * diff).sum(axis=1) + (SQRT2 / 2.0) * xd * gauss
        dx = (dx * g).astype(x.dtype)
        return (dx[:, 0] if squeeze else dx,)

    out = t[0] if squeeze else t
    return custom_op("ep_statistic", np.asarray(out, dtype=x.dtype), (x,), bw)


def ep_statistic_quadrature(x, t_max: float = 8.0, n_nodes: int = 4001) -> float:
    """N * integral |phi_N(t) - exp(-t^2/2)|^2 phi(t) dt by composite Simpson quadrature."""
    from scipy.integrate import simpson

    x = np.asarray(x, dtype=np.float64)
    t = np.linspace(-t_max, t_max, n_nodes)
    ecf = np.exp(1j * np.outer(t, x)).mean(axis=1)
    integrand = np.abs(ecf - np.exp(-0.5 * t * t)) ** 2 * np.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    return float(len(x) * simpson(integrand, x=t))


def random_directions(d: int, m: int, seed) -> np.ndarray:
    """``m`` unit vectors uniform on the (d-1)-sphere, as a d x m matrix.

    ``seed`` is an int or a tuple of ints (e.g. run seed plus step index).
    """
    keys = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    u = make_rng(*keys).standard_normal((d, m))
    return u / np.linalg.norm(u, axis=0, keepdims=True)


def sigreg_loss(emb: Tensor, n_directions: int, rng_seed) -> Tensor:
    """Average over random directions of ep_statistic(projection) / N."""
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ShapeError(f"sigreg_loss needs an N x d matrix with N >= 2, got {emb.shape}")
    n, d = emb.shape
    dirs = Tensor(random_directions(d, n_directions, rng_seed).astype(emb.dtype))
    t = ep_statistic(sb.matmul(emb, dirs))
    return sb.mul(sb.mean_reduce(t), 1.0 / n)


def total_loss(pred, sigreg, lam: float):
    return sb.add(sb.mul(pred, 1.0 - lam), sb.mul(sigreg, lam)) if isinstance(pred, Tensor) else (1.0 - lam) * pred + lam * sigreg
