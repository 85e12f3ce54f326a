"""A small eager reverse-mode autodiff tape over float64 numpy arrays.

Only the operations needed by the encoders and losses are provided. There is
no general broadcasting: elementwise ops require identical shapes, and the few
places that need a row vector added to a matrix use :func:`add_bias`.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from xmodal.errors import DegenerateInputError, DimensionError, EvaluationError, InputError

_state = threading.local()

_SIG_HI = np.nextafter(1.0, 0.0)
_SIG_LO = np.finfo(np.float64).tiny


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Immutable dense float64 array plus the bookkeeping for backward.

    ``data`` is a read-only numpy array. ``grad`` is filled in by
    :meth:`backward` for every node that requires a gradient.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_rule", "op", "kink")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if any(n <= 0 for n in arr.shape):
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self.backward_rule: Callable | None = None
        self.op = "leaf"
        self.kink = np.inf

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.shape[0]

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def backward(self) -> None:
        """Propagate gradients from this scalar node to every ancestor.

        Each node is visited once; contributions from several consumers are
        summed before a node's own rule runs. Existing ``grad`` values on the
        reachable nodes are overwritten.
        """
        if self.data.size != 1:
            raise DimensionError(f"backward needs a scalar root, got shape {self.shape}")
        order = _topological(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g
            if node.backward_rule is None:
                continue
            for parent, pg in zip(node.parents, node.backward_rule(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False) -> Tensor:
    if isinstance(data, Tensor):
        data = data.data
    return Tensor(data, requires_grad=requires_grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str, kink: float = np.inf) -> Tensor:
    out = Tensor.__new__(Tensor)
    arr = np.asarray(data, dtype=np.float64)
    arr.flags.writeable = False
    out.data = arr
    out.grad = None
    out.op = op
    out.kink = float(kink)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_rule = rule
    else:
        out.requires_grad = False
        out.parents = ()
        out.backward_rule = None
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def rule(g):
        return g @ bd.T, ad.T @ g

    return _result(ad @ bd, (a, b), rule, "matmul")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise ``add``, ``sub`` or ``mul`` of two same-shaped tensors."""
    _same_shape(a, b, op)
    ad, bd = a.data, b.data
    if op == "add":
        return _result(ad + bd, (a, b), lambda g: (g, g), "add")
    if op == "sub":
        return _result(ad - bd, (a, b), lambda g: (g, -g), "sub")
    if op == "mul":
        return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")
    raise InputError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b`` matches the last axis of ``x``."""
    if b.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not fit {x.shape}")
    axes = tuple(range(x.ndim - 1))
    return _result(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)), "add_bias")


def scale(x: Tensor, c) -> Tensor:
    """Multiply by a python scalar or a single-element tensor."""
    if isinstance(c, Tensor):
        if c.data.size != 1:
            raise DimensionError(f"scale: factor must be scalar, got {c.shape}")
        cv = float(c.data.reshape(-1)[0])
        xd = x.data

        def rule(g):
            return g * cv, np.reshape(np.sum(g * xd), c.shape)

        return _result(xd * cv, (x, c), rule, "scale")
    cv = float(c)
    return _result(x.data * cv, (x,), lambda g: (g * cv,), "scale")


def mul_rows(x: Tensor, w: Tensor) -> Tensor:
    """Scale row ``i`` of a 2-D tensor by ``w[i]``."""
    if x.ndim != 2 or w.shape != (x.shape[0],):
        raise DimensionError(f"mul_rows: weights {w.shape} do not fit {x.shape}")
    xd, wd = x.data, w.data

    def rule(g):
        return g * wd[:, None], np.sum(g * xd, axis=1)

    return _result(xd * wd[:, None], (x, w), rule, "mul_rows")


# ---------------------------------------------------------------- pointwise


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    # keep the open interval in floating point
    return np.clip(out, _SIG_LO, _SIG_HI)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid_np(x.data)
    return _result(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1.0 - t * t),), "tanh")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _result(np.maximum(x.data, 0.0), (x,), lambda g: (g * m,), "relu", np.abs(x.data).min())


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _result(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    if np.any(xd <= 0):
        raise InputError("log: input must be strictly positive")
    return _result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; gradient passes only where the value is inside."""
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    kink = min(np.abs(xd - lo).min(), np.abs(xd - hi).min())
    return _result(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,), "clamp", kink)


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def rule(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _result(np.sum(x.data, axis=axis), (x,), rule, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    shape = x.shape
    return _result(np.mean(x.data), (x,), lambda g: (np.full(shape, g / n),), "mean")


def _top_gap(x: np.ndarray, axis: int) -> float:
    """Smallest gap between the largest and second-largest entry along ``axis``.

    Exact ties at 0.0 are skipped: they are the floor of a rectifier, whose
    own margin is recorded on the ReLU node.
    """
    if x.shape[axis] < 2:
        return np.inf
    part = -np.partition(-x, 1, axis=axis)
    top = np.take(part, 0, axis=axis)
    gap = top - np.take(part, 1, axis=axis)
    keep = np.isfinite(gap) & ~((gap == 0) & (top == 0))
    return float(gap[keep].min()) if keep.any() else np.inf


def kink_margin(root: Tensor) -> float:
    """Distance from the nearest non-differentiable point over the recorded graph.

    ReLU, clamp, the max reductions and ``row_distance`` record how close
    their inputs sit to a switch (a zero, a bound, a tie, a zero distance).
    Only nodes kept for backward are visited.
    """
    return min((n.kink for n in _topological(root)), default=np.inf)


def spatial_max(x: Tensor) -> Tensor:
    """Per-channel maximum over the trailing two (spatial) axes.

    The full gradient goes to the first maximal position in row-major order.
    """
    if x.ndim < 3:
        raise DimensionError(f"spatial_max expects (..., C, H, W), got {x.shape}")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    idx = np.argmax(flat, axis=-1)
    vals = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def rule(g):
        dx = np.zeros_like(flat)
        np.put_along_axis(dx, idx[..., None], g[..., None], axis=-1)
        return (dx.reshape(x.shape),)

    return _result(vals, (x,), rule, "spatial_max", _top_gap(flat, -1))


def spatial_avg(x: Tensor) -> Tensor:
    if x.ndim < 3:
        raise DimensionError(f"spatial_avg expects (..., C, H, W), got {x.shape}")
    hw = x.shape[-1] * x.shape[-2]
    shape = x.shape

    def rule(g):
        return (np.broadcast_to(g[..., None, None] / hw, shape).copy(),)

    return _result(x.data.mean(axis=(-2, -1)), (x,), rule, "spatial_avg")


def max_over_time(h: Tensor, lengths: Sequence[int] | None = None) -> Tensor:
    """Per-dimension maximum over time steps.

    ``h`` is ``N x D`` for one sequence or ``B x T x D`` for a padded batch,
    in which case ``lengths`` marks the valid prefix of each row. Ties go to
    the earliest step.
    """
    if h.ndim == 2:
        idx = np.argmax(h.data, axis=0)
        vals = h.data[idx, np.arange(h.shape[1])]

        def rule(g):
            dh = np.zeros_like(h.data)
            dh[idx, np.arange(h.shape[1])] = g
            return (dh,)

        return _result(vals, (h,), rule, "max_over_time", _top_gap(h.data, 0))
    if h.ndim != 3:
        raise DimensionError(f"max_over_time expects N x D or B x T x D, got {h.shape}")
    B, T, D = h.shape
    lens = np.full(B, T) if lengths is None else np.asarray(lengths)
    if lens.shape != (B,) or np.any(lens < 1) or np.any(lens > T):
        raise InputError(f"max_over_time: invalid lengths {lengths} for shape {h.shape}")
    valid = np.arange(T)[None, :] < lens[:, None]
    masked = np.where(valid[:, :, None], h.data, -np.inf)
    idx = np.argmax(masked, axis=1)
    vals = np.take_along_axis(h.data, idx[:, None, :], axis=1)[:, 0, :]

    def rule(g):
        dh = np.zeros_like(h.data)
        np.put_along_axis(dh, idx[:, None, :], g[:, None, :], axis=1)
        return (dh,)

    return _result(vals, (h,), rule, "max_over_time", _top_gap(masked, 1))


# ---------------------------------------------------------------- structure


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def rule(g):
        dx = np.zeros(shape)
        dx[index] = g
        return (dx,)

    return _result(x.data[index], (x,), rule, "getitem")


def rows(x: Tensor, idx) -> Tensor:
    """Gather rows of a 2-D tensor; repeated indices accumulate gradient."""
    if x.ndim != 2:
        raise DimensionError(f"rows expects a matrix, got {x.shape}")
    ix = np.asarray(idx, dtype=np.intp)
    if ix.size and (ix.min() < 0 or ix.max() >= x.shape[0]):
        raise InputError(f"rows: index out of range for {x.shape[0]} rows")
    shape = x.shape

    def rule(g):
        dx = np.zeros(shape)
        np.add.at(dx, ix, g)
        return (dx,)

    return _result(x.data[ix], (x,), rule, "rows")


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _result(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), rule, "concat")


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    n = len(xs)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _result(np.stack([t.data for t in xs], axis=axis), tuple(xs), rule, "stack")


# ---------------------------------------------------------------- geometry


def l2_normalize(x: Tensor, eps: float = 0.0) -> Tensor:
    """Row-wise unit normalization of a ``B x D`` (or ``D``) tensor.

    With ``eps == 0`` a zero row is an error; otherwise ``eps`` is added to
    the norm.
    """
    xd = x.data
    norm = np.sqrt(np.sum(xd * xd, axis=-1, keepdims=True))
    if eps == 0.0 and np.any(norm == 0.0):
        raise DegenerateInputError("cannot normalize a zero-norm feature")
    n = norm + eps
    y = xd / n

    def rule(g):
        # d(x/n) where n = |x| + eps
        dot = np.sum(g * xd, axis=-1, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / n - xd * dot / (n * n * safe) * (norm > 0),)

    return _result(y, (x,), rule, "l2_normalize")


def row_distance(a: Tensor, b: Tensor) -> Tensor:
    """Euclidean distance between matching rows; zero distance has zero gradient."""
    _same_shape(a, b, "row_distance")
    if a.ndim != 2:
        raise DimensionError(f"row_distance expects B x D, got {a.shape}")
    diff = a.data - b.data
    d = np.sqrt(np.sum(diff * diff, axis=1))

    def rule(g):
        safe = np.where(d > 0, d, 1.0)
        unit = np.where((d > 0)[:, None], diff / safe[:, None], 0.0)
        return g[:, None] * unit, -g[:, None] * unit

    return _result(d, (a, b), rule, "row_distance", d.min())


def conv2d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid (unpadded) stride-1 convolution of ``B x C x H x W`` by ``O x C x k x k``."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or b.shape != (w.shape[0],):
        raise DimensionError(f"conv2d: input {x.shape}, weight {w.shape}, bias {b.shape}")
    B, C, H, W = x.shape
    O, _, k, k2 = w.shape
    if k != k2:
        raise DimensionError(f"conv2d: square kernels only, got {w.shape}")
    Ho, Wo = H - k + 1, W - k + 1
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: input {H}x{W} smaller than kernel {k}x{k}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    wm = w.data.reshape(O, -1)
    out = (cols @ wm.T + b.data).reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def rule(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (gm.T @ cols).reshape(w.shape)
        db = gm.sum(axis=0)
        dcols = (gm @ wm).reshape(B, Ho, Wo, C, k, k)
        dx = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                dx[:, :, i:i + Ho, j:j + Wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, dw, db

    return _result(out, (x, w, b), rule, "conv2d")


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradReport:
    op_name: str
    max_relative_error: float
    per_parameter: dict[str, float] = field(default_factory=dict)

    def passed(self, tol: float) -> bool:
        return self.max_relative_error < tol


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check(
    f: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray | Tensor],
    h: float = 1e-5,
    op_name: str = "f",
) -> GradReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    ``f`` receives a mapping of fresh leaf tensors keyed like ``params``.
    """
    base = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64) for k, v in params.items()}
    leaves = {k: Tensor(v, requires_grad=True) for k, v in base.items()}
    out = f(leaves)
    if out.data.size != 1:
        raise DimensionError(f"grad_check: {op_name} must return a scalar, got {out.shape}")
    if not np.isfinite(out.data).all():
        raise EvaluationError(f"{op_name} is not finite at the base point")
    if out.requires_grad:
        out.backward()

    def evaluate(name: str, coord: tuple, arr: np.ndarray) -> float:
        probe = {k: Tensor(arr if k == name else v) for k, v in base.items()}
        with no_grad():
            val = float(f(probe).data.reshape(-1)[0])
        if not np.isfinite(val):
            raise EvaluationError(f"{op_name} is not finite when perturbing {name}{list(coord)}")
        return val

    report = GradReport(op_name, 0.0)
    for name, arr in base.items():
        leaf = leaves[name]
        analytic = leaf.grad if leaf.grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        for coord in np.ndindex(arr.shape):
            work = arr.copy()
            work[coord] = arr[coord] + h
            fp = evaluate(name, coord, work)
            work[coord] = arr[coord] - h
            fm = evaluate(name, coord, work)
            numeric[coord] = (fp - fm) / (2.0 * h)
        err = float(relative_error(analytic, numeric).max()) if arr.size else 0.0
        report.per_parameter[name] = err
        report.max_relative_error = max(report.max_relative_error, err)
    return report
