"""Minimal numpy-backed reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Every op below returns a new tensor and,
if any input requires grad, records a node holding its parents and a backward
closure. :func:`backward` walks those nodes in reverse topological order.

Arrays are 32-bit by default. Ops preserve the dtype of their inputs, so a
float64 graph can be built for tight gradient checks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715
LN_EPS = 1e-5


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim == 0 and arr.size == 0:
            raise ShapeError("empty tensor")
        if arr.ndim > 0 and 0 in arr.shape:
            raise ShapeError(f"non-positive dimension in shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> dict:
        return backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_as_tensor(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_as_tensor(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return slice_(self, idx)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


def _node(data: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, a.dtype if isinstance(a, Tensor) else None)
    _broadcast_shape(a, b, "add")

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _node(a.data + b.data, (a, b), "add", bw)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _node(a.data * c, (a,), "mul", lambda g: (g * c,))
    _broadcast_shape(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), "mul", bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data @ b.data, (a, b), "matmul", bw)


def square(x: Tensor) -> Tensor:
    return _node(x.data * x.data, (x,), "square", lambda g: (2.0 * x.data * g,))


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.data < 0):
        raise ValueError("sqrt: negative input")
    out = np.sqrt(x.data)
    return _node(out, (x,), "sqrt", lambda g: (g * 0.5 / out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _node(out, (x,), "exp", lambda g: (g * out,))


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU: 0.5 x (1 + tanh(c (x + a x^3))), c = sqrt(2/pi), a = 0.044715."""
    xd = x.data
    dt = xd.dtype
    x2 = xd * xd
    t = np.tanh(dt.type(GELU_C) * xd * (1.0 + dt.type(GELU_A) * x2))
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = dt.type(GELU_C) * (1.0 + dt.type(3.0 * GELU_A) * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _node(out.astype(dt, copy=False), (x,), "gelu", bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _node(out, (x,), "softmax_lastdim", bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalise over the last axis with population variance, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        lead = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=lead)
        gbeta = g.sum(axis=lead)
        gx_hat = g * gamma.data
        gx = rstd * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, ggamma, gbeta

    return _node(out, (x, gamma, beta), "layer_norm", bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} into {shape}") from None
    return _node(out, (x,), "reshape", lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(x.ndim))) if axes is None else tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(x.data, axes), (x,), "transpose", lambda g: (np.transpose(g, inv),))


def slice_(x: Tensor, idx) -> Tensor:
    """Basic (non-fancy) indexing."""
    out = x.data[idx]
    if out.size == 0:
        raise ShapeError(f"slice: index {idx!r} selects nothing from shape {x.shape}")

    def bw(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    return _node(np.array(out, copy=True), (x,), "slice", bw)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in xs]} differ off axis {axis}")
    splits = np.cumsum([t.shape[ax] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _node(np.concatenate([t.data for t in xs], axis=ax), xs, "concat", bw)


def sum_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype),)

    return _node(np.asarray(out, dtype=x.dtype), (x,), "sum_reduce", bw)


def mean_reduce(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_reduce(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def segment_mean(x: Tensor, boundaries: Sequence[int]) -> Tensor:
    """Mean of row blocks ``x[b[i]:b[i+1]]`` for consecutive boundary offsets."""
    b = np.asarray(boundaries, dtype=np.int64)
    if b[0] != 0 or b[-1] != x.shape[0] or np.any(np.diff(b) <= 0):
        raise ShapeError(f"segment_mean: bad boundaries for {x.shape[0]} rows")
    counts = np.diff(b).astype(x.dtype)[:, None]
    out = np.add.reduceat(x.data, b[:-1], axis=0) / counts

    def bw(g):
        return (np.repeat(g / counts, np.diff(b), axis=0),)

    return _node(out, (x,), "segment_mean", bw)


OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "mul": mul,
    "layer_norm": layer_norm,
    "gelu": gelu,
    "softmax_lastdim": softmax_lastdim,
    "reshape": reshape,
    "transpose": transpose,
    "slice": slice_,
    "concat": concat,
    "mean_reduce": mean_reduce,
    "sum_reduce": sum_reduce,
    "square": square,
    "sqrt": sqrt,
    "exp": exp,
    "segment_mean": segment_mean,
}


def forward_op(kind: str, *inputs, **kwargs) -> Tensor:
    """Dispatch an op by name."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}; known: {sorted(OPS)}") from None
    return fn(*inputs, **kwargs)


def custom_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Record a composite op with a hand-written backward rule.

    ``backward_fn(g)`` must return one gradient (or None) per parent.
    """
    return _node(data, parents, op, backward_fn)


# ---------------------------------------------------------------------------
# reverse pass


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    Returns a mapping ``{leaf: grad}``.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=p.dtype)
            if pg.shape != p.shape:
                raise ShapeError(f"{node.op}: gradient shape {pg.shape} != input shape {p.shape}")
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
    return leaves


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: dict = field(default_factory=dict)
    n_checked: dict = field(default_factory=dict)
    failure: str | None = None

    def __str__(self):
        lines = [f"grad_check {'PASS' if self.passed else 'FAIL'}"]
        for name, err in self.max_rel_error.items():
            lines.append(f"  {name}: max_rel_err={err:.3e} over {self.n_checked[name]} entries")
        if self.failure:
            lines.append(f"  failure: {self.failure}")
        return "\n".join(lines)


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    # entries far below the leaf's gradient scale are judged against that scale
    floor = 1e-2 * max(float(np.abs(numeric).max()), float(np.abs(analytic).max())) + 1e-8
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _float_array(a) -> np.ndarray:
    a = np.array(a)
    return a if np.issubdtype(a.dtype, np.floating) else a.astype(DEFAULT_DTYPE)


def grad_check(
    f: Callable[..., Tensor],
    points,
    step: float = 1e-3,
    rtol: float = 1e-2,
    max_entries: int | None = None,
    seed: int = 0,
    fd_dtype=None,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*leaves)`` with central differences.

    ``points`` is an array, a list of arrays or a ``{name: array}`` dict; each
    becomes a leaf. With ``max_entries`` only that many randomly chosen
    coordinates per leaf are perturbed. ``fd_dtype`` (e.g. ``np.float64``)
    evaluates the finite differences in that precision at the same points, so
    float32 analytic gradients are judged against a reference free of float32
    round-off.
    """
    if isinstance(points, dict):
        names, arrays = list(points), list(points.values())
    elif isinstance(points, np.ndarray) or np.isscalar(points):
        names, arrays = ["x0"], [points]
    else:
        names, arrays = [f"x{i}" for i in range(len(points))], list(points)
    arrays = [_float_array(a) for a in arrays]

    def evaluate(arrs, track=False):
        leaves = [Tensor(a.copy(), requires_grad=track) for a in arrs]
        out = f(*leaves)
        if out.data.size != 1:
            raise ShapeError(f"grad_check: f must return a scalar, got {out.shape}")
        return out, leaves

    report = GradCheckReport(passed=True)
    out, leaves = evaluate(arrays, track=True)
    fd_arrays = arrays if fd_dtype is None else [a.astype(fd_dtype) for a in arrays]
    if not np.isfinite(out.data).all():
        return GradCheckReport(False, failure="non-finite value at the base point")
    backward(out)
    rng = np.random.default_rng(seed)
    for name, arr, fd_arr, leaf in zip(names, arrays, fd_arrays, leaves):
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        if not np.isfinite(analytic).all():
            return GradCheckReport(False, report.max_rel_error, report.n_checked,
                                   f"non-finite analytic gradient in {name}")
        flat_idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            flat_idx = np.sort(rng.choice(arr.size, size=max_entries, replace=False))
        numeric = np.empty(len(flat_idx), dtype=np.float64)
        for j, fi in enumerate(flat_idx):
            idx = np.unravel_index(fi, arr.shape)
            orig = fd_arr[idx]
            bumped = fd_arr.copy()
            bumped[idx] = orig + step
            plus = [bumped if a is fd_arr else a for a in fd_arrays]
            fp = float(evaluate(plus)[0].data)
            bumped[idx] = orig - step
            fm = float(evaluate(plus)[0].data)
            if not (math.isfinite(fp) and math.isfinite(fm)):
                return GradCheckReport(False, report.max_rel_error, report.n_checked,
                                       f"non-finite value when perturbing {name}{list(idx)}")
            # step actually applied after rounding to the leaf dtype
            h = float(fd_arr.dtype.type(orig + step)) - float(fd_arr.dtype.type(orig - step))
            numeric[j] = (fp - fm) / h
        errs = _rel_errors(analytic.reshape(-1)[flat_idx].astype(np.float64), numeric)
        report.max_rel_error[name] = float(errs.max())
        report.n_checked[name] = int(len(flat_idx))
        if errs.max() > rtol:
            report.passed = False
    return report
