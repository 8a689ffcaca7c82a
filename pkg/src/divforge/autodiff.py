"""Minimal reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive returns a new :class:`Tensor` holding its parents and a
closure that pushes the upstream gradient back to them.  ``backward`` orders
the graph topologically (parents before children) and visits each node once
in reverse.  Broadcasting is limited to a size-1 operand against a tensor.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

LEAKY_SLOPE = 0.01

_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextmanager
def no_grad():
    """Evaluate without recording parents or backward closures."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"expected a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)
    def __rmul__(self, other): return self.__mul__(other)
    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)
    def __neg__(self): return scale(self, -1.0)
    def __matmul__(self, other): return matmul(self, other)
    def __getitem__(self, idx): return take(self, idx)

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = False
    if _grad_enabled:
        for p in parents:
            if p.requires_grad:
                out.requires_grad = True
                break
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True).reshape(t.shape)
    else:
        t.grad += g.reshape(t.shape) if g.shape != t.shape else g


def _reduce_to(g: np.ndarray, t: Tensor) -> np.ndarray:
    # a size-1 operand broadcast against a larger one receives the summed gradient
    if t.data.shape == g.shape:
        return g
    return np.asarray(g.sum()).reshape(t.shape)


def _check_elementwise(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


# ---------------------------------------------------------------------------
# binary primitives

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("add", a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(g, b))

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("sub", a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g, a))
        _accumulate(b, _reduce_to(-g, b))

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    """Elementwise product."""
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("mul", a, b)

    def bw(g):
        _accumulate(a, _reduce_to(g * b.data, a))
        _accumulate(b, _reduce_to(g * a.data, b))

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise("div", a, b)
    out = a.data / b.data

    def bw(g):
        _accumulate(a, _reduce_to(g / b.data, a))
        _accumulate(b, _reduce_to(-g * out / b.data, b))

    return _result(out, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a constant Python scalar."""
    a = as_tensor(a)
    c = float(c)

    def bw(g):
        _accumulate(a, g * c)

    return _result(a.data * c, (a,), bw)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def bw(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops

def sum(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _result(np.asarray(a.data.sum()), (a,), bw)


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ShapeError("mean of an empty tensor")
    n = a.size

    def bw(g):
        _accumulate(a, np.broadcast_to(g / n, a.shape))

    return _result(np.asarray(a.data.mean()), (a,), bw)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {a.shape}")

    def bw(g):
        _accumulate(a, g.T)

    return _result(a.data.T.copy(), (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of no tensors")
    ref = ts[0].shape
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                _accumulate(t, np.take(g, np.arange(lo, hi), axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), ts, bw)


def take(a, idx) -> Tensor:
    """Basic slicing (slices and integers only)."""
    a = as_tensor(a)
    parts = idx if isinstance(idx, tuple) else (idx,)
    if not all(isinstance(p, (slice, int)) for p in parts):
        raise TypeError("only slice/int indexing is supported")
    out = a.data[idx].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        _accumulate(a, full)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# elementwise unary primitives

def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, g / a.data)

    return _result(np.log(a.data), (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        _accumulate(a, g * out)

    return _result(out, (a,), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        _accumulate(a, 2.0 * a.data * g)

    return _result(a.data * a.data, (a,), bw)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _stable_sigmoid(a.data)

    def bw(g):
        _accumulate(a, g * out * (1.0 - out))

    return _result(out, (a,), bw)


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(x)) = min(x, 0) - log1p(exp(-|x|)), finite for any x."""
    a = as_tensor(a)
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        # d/dx log sigmoid(x) = sigmoid(-x)
        _accumulate(a, g * _stable_sigmoid(-x))

    return _result(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        _accumulate(a, g * mask)

    return _result(np.maximum(a.data, 0.0), (a,), bw)


def leaky_relu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    slope = np.where(x > 0, 1.0, np.where(x < 0, LEAKY_SLOPE, 0.0))

    def bw(g):
        _accumulate(a, g * slope)

    return _result(np.where(x > 0, x, LEAKY_SLOPE * x), (a,), bw)


# ---------------------------------------------------------------------------
# graph traversal

def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root``, each listed after all of its parents."""
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
        for p in reversed(node._parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor) -> None:
    if root.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root is not connected to any tensor that requires grad")
    order = topological_order(root)
    # interior gradients are scratch space; leaves accumulate across calls
    for node in order:
        if node._backward is not None:
            node.grad = None
    root.grad = np.ones_like(root.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# numerical checking

def numerical_grad(fn: Callable[[Tensor], Tensor], point: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x0 = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    for i in range(x0.size):
        xp = x0.copy().reshape(-1)
        xm = x0.copy().reshape(-1)
        xp[i] += step
        xm[i] -= step
        with no_grad():
            fp = fn(Tensor(xp.reshape(x0.shape))).item()
            fm = fn(Tensor(xm.reshape(x0.shape))).item()
        flat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).

    Raises FloatingPointError naming the first coordinate where either
    gradient is non-finite.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = Tensor(point, requires_grad=True)
    out = fn(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(x.data)
    numeric = numerical_grad(fn, x.data, step)
    bad = ~(np.isfinite(analytic) & np.isfinite(numeric))
    if bad.any():
        i = int(np.flatnonzero(bad.reshape(-1))[0])
        raise FloatingPointError(f"non-finite gradient at coordinate {i}")
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


def parameters_grad_check(
    loss_fn: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-6
) -> float:
    """Like :func:`grad_check` but perturbs existing parameter tensors in place."""
    params = list(params)
    for p in params:
        p.zero_grad()
    backward(loss_fn())
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                fp = loss_fn().item()
            flat[i] = orig - step
            with no_grad():
                fm = loss_fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            if not (math.isfinite(a) and math.isfinite(num)):
                raise FloatingPointError(f"non-finite gradient in {p.name or 'parameter'} at {i}")
            worst = max(worst, abs(a - num) / (abs(a) + 1e-12))
    return worst
