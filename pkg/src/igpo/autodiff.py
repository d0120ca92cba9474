"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every op builds a node holding its value and a closure that
routes the output adjoint to the inputs. Graphs are rebuilt per training
step and freed afterwards. All math is float64; every op checks its output
for non-finite values and raises NumericalError naming the op.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable

import numpy as np

from .errors import NumericalError, ShapeError

Array = np.ndarray
GradientStore = dict[str, Array]

_GRAD_ENABLED = True
_FINITE_CHECKS = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-op NaN/Inf checking; returns the previous setting."""
    global _FINITE_CHECKS
    prev = _FINITE_CHECKS
    _FINITE_CHECKS = enabled
    return prev


def _check_finite(data: Array, op: str) -> None:
    if not _FINITE_CHECKS:
        return
    # single-reduction fast path; a finite sum implies all entries finite
    if np.isfinite(data.sum()):
        return
    if not np.isfinite(data).all():
        raise NumericalError(f"non-finite value produced by op '{op}'")


class Tensor:
    """A node in the expression graph: float64 value plus backward plumbing."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "requires_grad", "op")

    def __init__(self, data, parents=(), bwd=None, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = parents
        self._bwd: Callable[[Array], None] | None = bwd
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, op="detach")

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64), op="const")


def parameter(data: Array, name: str = "param") -> Tensor:
    t = Tensor(data, requires_grad=True, op=name)
    return t


def _tracked(*inputs: Tensor) -> bool:
    return _GRAD_ENABLED and any(t.requires_grad for t in inputs)


def _node(data: Array, op: str, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    _check_finite(data, op)
    if _tracked(*inputs):
        return Tensor(data, parents=inputs, bwd=bwd, requires_grad=True, op=op)
    return Tensor(data, op=op)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Reduce a broadcast gradient back to the operand's original shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- arithmetic ----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.shape))

    return _node(out, "add", (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g, b.shape))

    return _node(out, "sub", (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, "mul", (a, b), bwd)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _node(out, "div", (a, b), bwd)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data**p

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * p * a.data ** (p - 1.0))

    return _node(out, "pow", (a,), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * out)

    return _node(out, "exp", (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g / a.data)

    return _node(out, "log", (a,), bwd)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * (1.0 - out * out))

    return _node(out, "tanh", (a,), bwd)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """Smooth tanh-approximation GELU (finite-difference friendly)."""
    a = as_tensor(a)
    x = a.data
    inner = x * x
    inner *= 0.044715
    inner += 1.0
    inner *= x
    inner *= _GELU_C  # C * (x + 0.044715 x^3)
    th = np.tanh(inner)
    out = th + 1.0
    out *= x
    out *= 0.5

    def bwd(g):
        if a.requires_grad:
            sech2 = 1.0 - th * th
            d_inner = x * x
            d_inner *= 3 * 0.044715
            d_inner += 1.0
            d_inner *= _GELU_C
            _accum(a, g * (0.5 * (1.0 + th) + 0.5 * x * sech2 * d_inner))

    return _node(out, "gelu", (a,), bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accum(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accum(b, _unbroadcast(gb, b.shape))

    return _node(out, "matmul", (a, b), bwd)


def minimum(a, b) -> Tensor:
    """Elementwise min; on ties the adjoint goes to the first operand."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    out = np.where(take_a, a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * take_a, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * ~take_a, b.shape))

    return _node(out, "minimum", (a, b), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; adjoint passes only where the input is in range."""
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g * inside)

    return _node(out, "clip", (a,), bwd)


# -- reductions / shape --------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _node(out, "sum", (a,), bwd)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[i] for i in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, g.reshape(a.shape))

    return _node(out, "reshape", (a,), bwd)


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = np.swapaxes(a.data, ax1, ax2)

    def bwd(g):
        if a.requires_grad:
            _accum(a, np.swapaxes(g, ax1, ax2))

    return _node(out, "swapaxes", (a,), bwd)


def expand(a, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.shape))

    return _node(out.copy(), "expand", (a,), bwd)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    out = a.data[idx]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[idx] = g
            _accum(a, full)

    return _node(out.copy() if isinstance(out, np.ndarray) else out, "getitem", (a,), bwd)


# -- lookup / neural primitives ------------------------------------------


def embedding(table, ids: Array) -> Tensor:
    """Row lookup table[ids]; scatter-add on the way back."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
            _accum(table, full)

    return _node(out, "embedding", (table,), bwd)


def take_along_last(a, ids: Array) -> Tensor:
    """Pick one entry per row along the last axis: out[...] = a[..., ids[...]]."""
    a = as_tensor(a)
    ids = np.asarray(ids)
    out = np.take_along_axis(a.data, ids[..., None], axis=-1)[..., 0]

    def bwd(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.put_along_axis(full, ids[..., None], g[..., None], axis=-1)
            _accum(a, full)

    return _node(out, "take_along_last", (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * out).sum(axis=axis, keepdims=True)
            _accum(a, out * (g - dot))

    return _node(out, "softmax", (a,), bwd)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(out).sum(axis=axis, keepdims=True))
    out -= lse

    def bwd(g):
        if a.requires_grad:
            p = np.exp(out)
            _accum(a, g - p * g.sum(axis=axis, keepdims=True))

    return _node(out, "log_softmax", (a,), bwd)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xhat = x - mu
    var = (xhat * xhat).mean(axis=-1, keepdims=True)
    var += eps
    inv = 1.0 / np.sqrt(var)
    xhat *= inv
    out = xhat * gamma.data
    out += beta.data

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, _unbroadcast(g * xhat, gamma.shape))
        if beta.requires_grad:
            _accum(beta, _unbroadcast(g, beta.shape))
        if a.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            _accum(a, inv * (dxhat - m1 - xhat * m2))

    return _node(out, "layer_norm", (a, gamma, beta), bwd)


# -- backward engine ------------------------------------------------------


def _accum(t: Tensor, g: Array) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    """Seed the root with adjoint 1 and propagate through the graph."""
    if root.data.ndim != 0:
        raise ShapeError(f"backward requires a scalar root, got shape {root.data.shape}")
    if not root.requires_grad:
        return
    root.grad = np.asarray(1.0)
    for node in reversed(_toposort(root)):
        if node._bwd is not None and node.grad is not None:
            node._bwd(node.grad)
            node.grad = None if node is not root else node.grad
            # freeing intermediate adjoints keeps peak memory flat


def lift(params: dict[str, Array]) -> dict[str, Tensor]:
    """Wrap raw parameter arrays as graph leaves (one leaf per name)."""
    return {name: parameter(arr, name) for name, arr in params.items()}


def collect_gradients(leaves: dict[str, Tensor]) -> GradientStore:
    """Read leaf adjoints after backward; absent paths yield exact zeros."""
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in leaves.items()
    }


def evaluate_and_backprop(
    fn: Callable[[dict[str, Tensor]], Tensor], params: dict[str, Array]
) -> tuple[float, GradientStore]:
    """Evaluate a scalar expression of the parameters and return its gradient.

    `fn` receives the lifted leaves and must return a scalar Tensor; the
    result is exact reverse-mode differentiation, bit-reproducible across
    calls with identical inputs.
    """
    leaves = lift(params)
    root = fn(leaves)
    if not isinstance(root, Tensor):
        raise ShapeError("expression must return a Tensor")
    if root.data.ndim != 0:
        raise ShapeError(f"expression root must be scalar, got shape {root.data.shape}")
    backward(root)
    return float(root.data), collect_gradients(leaves)


def finite_difference_gradient(
    fn: Callable[[dict[str, Array]], float],
    params: dict[str, Array],
    epsilon: float = 1e-4,
) -> GradientStore:
    """Central-difference gradient oracle: (f(p+eps) - f(p-eps)) / 2 eps.

    Independent of the reverse-mode path; `fn` must be deterministic given
    its own internal seeding. O(#coordinates) evaluations, so keep models
    small (<= 5k parameters) when using this as an acceptance gate.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    grads: GradientStore = {}
    work = {k: v.astype(np.float64).copy() for k, v in params.items()}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = fn(work)
            flat[i] = orig - epsilon
            fm = fn(work)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError(
                    f"finite differences hit a non-finite value at {name}[{i}]"
                )
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        grads[name] = g
    return grads


def max_relative_error(
    analytic: GradientStore, numeric: GradientStore, floor: float = 1e-3
) -> float:
    """Worst-case |a-b| / max(|a|, |b|, floor) across all coordinates.

    The floor turns the comparison into an absolute one for near-zero
    gradients, where central differences are dominated by roundoff.
    """
    worst = 0.0
    for name in analytic:
        a, b = analytic[name], numeric[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
        worst = max(worst, float((np.abs(a - b) / denom).max()) if a.size else 0.0)
    return worst


def grad_norm(grads: GradientStore) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
