"""Dense-tensor substrate with reverse-mode differentiation.

numpy owns the raw arrays; this module adds the tape. Every operation
returns a Tensor that remembers its parents and a backward closure, and
``Tensor.backward()`` replays the tape once in reverse topological order.
The test suite runs everything in 64-bit (finite differences need the
headroom); the training loop runs in 32-bit.

Layout convention for feature maps is [batch, channel, height, width].
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf


class NumericsError(RuntimeError):
    """Raised when a non-finite value shows up in the compute graph."""


_GRAD_ENABLED = [True]
_FINITE_CHECKS = [True]


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward-only evaluation)."""
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


@contextlib.contextmanager
def finite_checks(enabled: bool):
    """Toggle per-op NaN/Inf checking (on by default, off in hot loops)."""
    _FINITE_CHECKS.append(enabled)
    try:
        yield
    finally:
        _FINITE_CHECKS.pop()


def _check_finite(data: np.ndarray, op: str):
    if _FINITE_CHECKS[-1] and not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A dense array plus optional gradient and tape linkage.

    ``data`` and ``grad`` (when present) always share shape and dtype.
    Tensors are treated as immutable once created; the optimizer mutates
    parameter ``data`` in place between graph constructions.
    """

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return self.data.item()

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, grad={self.requires_grad})"

    # -- tape ----------------------------------------------------------

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode pass from a scalar root.

        Visits every reachable recorded op exactly once, in reverse
        topological order, accumulating gradients into ``grad`` buffers
        of tensors with ``requires_grad`` set.
        """
        if self.data.size != 1:
            raise NumericsError("backward() requires a scalar root")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if _FINITE_CHECKS[-1]:
                    for p in node._parents:
                        if p.grad is not None and not np.all(np.isfinite(p.grad)):
                            raise NumericsError(
                                f"non-finite gradient below op '{node.op}'"
                            )

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other, self.dtype))

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents, backward, op: str) -> Tensor:
    """Central constructor for op results; applies finite checking."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if _GRAD_ENABLED[-1] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _node(data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _node(data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), backward, "mul")


def div(a: Tensor, b: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(data, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _node(-a.data, (a,), backward, "neg")


def tabs(a: Tensor) -> Tensor:
    """Elementwise absolute value; subgradient 0 at exactly 0."""
    data = np.abs(a.data)

    def backward(g):
        a._accumulate(g * np.sign(a.data))

    return _node(data, (a,), backward, "abs")


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; subgradient 0 where the input is 0."""
    data = np.sqrt(a.data)

    def backward(g):
        denom = 2.0 * data
        ga = np.where(a.data > 0, g / np.where(denom > 0, denom, 1.0), 0.0)
        a._accumulate(ga)

    return _node(data, (a,), backward, "sqrt")


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _node(data, (a,), backward, "relu")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    data = (x * cdf).astype(x.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        a._accumulate(g * (cdf + x * pdf))

    return _node(data, (a,), backward, "gelu")


# -- shape manipulation ------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    return _node(a.data.reshape(shape), (a,), backward, "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inv))

    return _node(a.data.transpose(axes), (a,), backward, "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = np.broadcast_to(a.data, shape).copy()

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))

    return _node(data, (a,), backward, "broadcast_to")


def concat(tensors, axis: int) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _node(data, tensors, backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis."""
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def backward(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        a._accumulate(ga)

    return _node(a.data[idx].copy(), (a,), backward, "narrow")


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor by index (duplicates allowed)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        a._accumulate(ga)

    return _node(a.data[idx].copy(), (a,), backward, "gather_rows")


def scatter_rows(rows: Tensor, idx: np.ndarray, n_rows: int) -> Tensor:
    """Scatter-add 2-D row contributions into an [n_rows, C] tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    data = np.zeros((n_rows, rows.shape[1]), dtype=rows.dtype)
    np.add.at(data, idx, rows.data)

    def backward(g):
        rows._accumulate(g[idx])

    return _node(data, (rows,), backward, "scatter_rows")


# -- reductions ------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g, a.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.broadcast_to(g, a.shape)
        a._accumulate(ga)

    return _node(np.asarray(data), (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )

    def backward(g):
        if axis is None:
            ga = np.broadcast_to(g / count, a.shape)
        else:
            if not keepdims:
                g = np.expand_dims(g, axis)
            ga = np.broadcast_to(g / count, a.shape)
        a._accumulate(ga)

    return _node(np.asarray(data), (a,), backward, "mean")


def std_pop(a: Tensor) -> Tensor:
    """Population standard deviation of all elements (N, not N-1)."""
    mu = tmean(a)
    centered = sub(a, mu)
    return sqrt(tmean(mul(centered, centered)))


# -- softmax ------------------------------------------------


def softmax(x: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not -x.ndim <= axis < x.ndim:
        raise NumericsError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        x._accumulate(y * (g - dot))

    return _node(y, (x,), backward, "softmax")


# -- spatial ops ------------------------------------------------


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over H and W of a [B, C, H, W] map, keeping spatial dims."""
    if x.ndim != 4:
        raise NumericsError(f"global_avg_pool expects rank-4 input, got {x.shape}")
    if x.shape[2] * x.shape[3] == 0:
        raise NumericsError("global_avg_pool over empty spatial extent")
    return tmean(x, axis=(2, 3), keepdims=True)


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """2-D convolution, stride 1, zero padding that preserves H and W.

    x: [B, Cin, H, W], w: [Cout, Cin, k, k] with odd k, b: [Cout] or None.
    """
    B, Cin, H, W = x.shape
    Cout, Cin_w, k, k2 = w.shape
    if Cin != Cin_w or k != k2 or k % 2 != 1:
        raise NumericsError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    p = k // 2
    xp = _pad_spatial(x.data, p)
    # cols[b, c, u, v, h, w] = xp[b, c, h+u, w+v]
    cols = np.empty((B, Cin, k, k, H, W), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[:, :, u, v] = xp[:, :, u:u + H, v:v + W]
    cols_mat = cols.reshape(B, Cin * k * k, H * W)
    w_mat = w.data.reshape(Cout, Cin * k * k)
    out = np.matmul(w_mat, cols_mat).reshape(B, Cout, H, W)
    if b is not None:
        out = out + b.data.reshape(1, Cout, 1, 1)

    def backward(g):
        g_mat = g.reshape(B, Cout, H * W)
        if w.requires_grad:
            gw = np.matmul(g_mat, cols_mat.transpose(0, 2, 1)).sum(axis=0)
            w._accumulate(gw.reshape(w.shape))
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gcols = np.matmul(w_mat.T, g_mat).reshape(B, Cin, k, k, H, W)
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u:u + H, v:v + W] += gcols[:, :, u, v]
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            x._accumulate(gx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "conv2d")


def dwconv2d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Depthwise (per-channel) 2-D convolution, stride 1, zero padding.

    x: [B, C, H, W], w: [C, k, k], b: [C] or None. Differentiable in both
    x and w, so the same op serves learned kernels and dynamic filters.
    """
    B, C, H, W = x.shape
    Cw, k, k2 = w.shape
    if C != Cw or k != k2 or k % 2 != 1:
        raise NumericsError(f"dwconv2d shape mismatch: x {x.shape}, w {w.shape}")
    p = k // 2
    xp = _pad_spatial(x.data, p)
    out = np.zeros_like(x.data)
    for u in range(k):
        for v in range(k):
            out += w.data[:, u, v].reshape(1, C, 1, 1) * xp[:, :, u:u + H, v:v + W]
    if b is not None:
        out = out + b.data.reshape(1, C, 1, 1)

    def backward(g):
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for u in range(k):
                for v in range(k):
                    gw[:, u, v] = np.einsum(
                        "bchw,bchw->c", xp[:, :, u:u + H, v:v + W], g
                    )
            w._accumulate(gw)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for u in range(k):
                for v in range(k):
                    gxp[:, :, u:u + H, v:v + W] += (
                        w.data[:, u, v].reshape(1, C, 1, 1) * g
                    )
            gx = gxp[:, :, p:p + H, p:p + W] if p else gxp
            x._accumulate(gx)

    parents = (x, w) if b is None else (x, w, b)
    return _node(out, parents, backward, "dwconv2d")


# -- matmul ------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; supports equal leading batch dims (np.matmul rules)."""
    data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate(_unbroadcast(gb, b.shape))

    return _node(data, (a, b), backward, "matmul")


# -- non-differentiable utilities ----------------------------------------


def clamp01(x: Tensor) -> Tensor:
    """Clip to [0, 1]; gradient passes only through the interior."""
    data = np.clip(x.data, 0.0, 1.0)

    def backward(g):
        x._accumulate(g * ((x.data >= 0.0) & (x.data <= 1.0)))

    return _node(data, (x,), backward, "clamp01")


def topk(values: np.ndarray, k: int):
    """Indices and values of the k largest entries of a 1-D array.

    Sorted descending by value; ties broken by lowest index (stable sort
    on the negated values).
    """
    values = np.asarray(values)
    n = values.shape[-1]
    if values.ndim == 1:
        if not 1 <= k <= n:
            raise NumericsError(f"topk k={k} out of range for length {n}")
        idx = np.argsort(-values, kind="stable")[:k]
        return idx, values[idx]
    if not 1 <= k <= n:
        raise NumericsError(f"topk k={k} out of range for length {n}")
    idx = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    return idx, np.take_along_axis(values, idx, axis=-1)


# -- gradient checking ------------------------------------------------


@dataclass
class GradCheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    passed: bool
    tol: float
    checked: int
    worst: GradCheckEntry | None
    failures: list

    def __str__(self):
        if self.worst is None:
            return "grad_check: nothing checked"
        status = "PASS" if self.passed else "FAIL"
        w = self.worst
        return (
            f"grad_check {status}: {self.checked} entries, worst {w.name}{w.index} "
            f"rel_err={w.rel_error:.3e} (analytic {w.analytic:.6e}, "
            f"numeric {w.numeric:.6e}, tol {self.tol:g})"
        )


def grad_check(f, params: dict, step: float = 1e-5, tol: float = 1e-4,
               rel_floor: float = 1e-3) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f()`` against central differences.

    ``f`` rebuilds the graph from the given parameter tensors on each call
    and returns a scalar Tensor. Relative error uses a floor so that
    near-zero gradients compare in absolute terms. Requires 64-bit params.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise NumericsError(f"grad_check requires float64 params ({name})")
    for p in params.values():
        p.zero_grad()
    out = f()
    if not np.all(np.isfinite(out.data)):
        raise NumericsError("grad_check: non-finite objective")
    out.backward()
    analytic = {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in params.items()
    }

    worst = None
    failures = []
    checked = 0
    with no_grad(), finite_checks(False):
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                f_plus = f().item()
                flat[i] = orig - step
                f_minus = f().item()
                flat[i] = orig
                fd = (f_plus - f_minus) / (2.0 * step)
                an = float(analytic[name].reshape(-1)[i])
                denom = max(abs(fd), abs(an), rel_floor)
                err = abs(fd - an) / denom
                idx = np.unravel_index(i, p.shape)
                entry = GradCheckEntry(name, idx, an, fd, err)
                checked += 1
                if worst is None or err > worst.rel_error:
                    worst = entry
                if err > tol:
                    failures.append(entry)
    for p in params.values():
        p.zero_grad()
    return GradCheckReport(not failures, tol, checked, worst, failures)
