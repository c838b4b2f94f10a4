"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operators the masked autoencoder and its losses need are provided.
Every operator records a backward closure on its output; ``Tensor.backward``
walks the recorded graph in reverse topological order.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

ARCCOS_CLAMP = 1e-7

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value or an unguarded division by zero."""


class UsageError(RuntimeError):
    """The autodiff API was called incorrectly."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _faults() -> set:
    if not hasattr(_state, "faults"):
        _state.faults = set()
    return _state.faults


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on the current thread."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


@contextlib.contextmanager
def inject_fault(op: str, factor: float = 1.5):
    """Scale the backward rule of ``op`` by ``factor`` (fault-injection hook for gradcheck)."""
    faults = _faults()
    faults.add((op, factor))
    try:
        yield
    finally:
        faults.discard((op, factor))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # -- operators --------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    # -- reverse mode -----------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable tensor needing it."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise UsageError("backward() root is not connected to any tensor requiring grad")
        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        faults = _faults()
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            if faults:
                for op, factor in faults:
                    if op == node.op:
                        parent_grads = tuple(None if pg is None else pg * factor for pg in parent_grads)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg


def _topological_order(root: Tensor) -> list[Tensor]:
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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out.op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- binary elementwise ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise NumericError("div: zero in denominator; add a guard epsilon")
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return _result(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast as in ``numpy.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _result(out, (a, b), backward, "matmul")


# -- unary elementwise -------------------------------------------------------

def sqrt(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise NumericError("sqrt: negative input")
    out = np.sqrt(x.data)

    def backward(g):
        if np.any(out == 0):
            raise NumericError("sqrt: gradient undefined at 0")
        return (g * 0.5 / out,)

    return _result(out, (x,), backward, "sqrt")


def square(x) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,), "square")


def tabs(x) -> Tensor:
    x = as_tensor(x)
    return _result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    return _result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def clamp(x, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to [lo, hi]; gradient is zero where the bound is active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)

    def backward(g):
        inside = np.ones_like(x.data, dtype=bool)
        if lo is not None:
            inside &= x.data >= lo
        if hi is not None:
            inside &= x.data <= hi
        return (g * inside,)

    return _result(out, (x,), backward, "clamp")


def arccos(x, eps: float = ARCCOS_CLAMP) -> Tensor:
    """arccos of the argument clamped to [-1+eps, 1-eps].

    The derivative is evaluated at the clamped argument and passed straight
    through, so it stays finite even when |x| reaches 1.
    """
    x = as_tensor(x)
    c = np.clip(x.data, -1.0 + eps, 1.0 - eps)
    out = np.arccos(c)

    def backward(g):
        return (-g / np.sqrt(1.0 - c * c),)

    return _result(out, (x,), backward, "arccos")


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT1_2))
    out = x.data * cdf

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(out, (x,), backward, "gelu")


# -- reductions ----------------------------------------------------------------

def _axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def _expand(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if not keepdims:
        g = np.expand_dims(g, _axes(axis, len(shape)))
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims).copy(),), "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = int(np.prod([x.shape[a] for a in _axes(axis, x.ndim)]))
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    return _result(out, (x,), lambda g: (_expand(g, x.shape, axis, keepdims) / n,), "mean")


def dot(a, b, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Inner product of ``a`` and ``b`` along ``axis``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"dot: shapes differ {a.shape} vs {b.shape}")
    out = np.sum(a.data * b.data, axis=axis, keepdims=keepdims)

    def backward(g):
        g = _expand(g, a.shape, axis, keepdims)
        return g * b.data, g * a.data

    return _result(out, (a, b), backward, "dot")


def l2norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    nrm = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))
    out = nrm if keepdims else np.squeeze(nrm, axis=axis)

    def backward(g):
        g = _expand(g, x.shape, axis, keepdims)
        safe = np.where(nrm > 0, nrm, 1.0)
        return (g * np.where(nrm > 0, x.data / safe, 0.0),)

    return _result(out, (x,), backward, "l2norm")


# -- normalisation / probabilities ---------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not np.all(np.isfinite(x.data)):
        raise NumericError("log_softmax: non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with affine ``gamma``/``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} vs features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), backward, "layernorm")


# -- shape manipulation ----------------------------------------------------------

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose")


def getitem(x, key) -> Tensor:
    """Basic or advanced indexing; the backward pass scatter-adds."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _result(x.data[key], (x,), backward, "getitem")


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(out, ts, backward, "concat")


# -- finite-difference checking --------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of the scalar ``fn()`` w.r.t. ``x.data`` (perturbed in place)."""
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = fn().item()
            flat[i] = orig - step
            down = fn().item()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude (normwise relative error)."""
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), 1e-12)
    return float(np.max(np.abs(analytic - numeric), initial=0.0) / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients over ``inputs``."""
    for t in inputs:
        t.grad = None
    fn().backward()
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, relative_error(analytic, numerical_grad(fn, t, step)))
    return worst
