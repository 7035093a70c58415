"""Dense float64 tensors with reverse-mode differentiation.

Every forward op records a lightweight graph node; ``backward`` walks the
graph once and accumulates gradients into ``Parameter`` leaves. Shapes follow
numpy broadcasting (matmul included, so batched stacks of matrices work).
Training math is 64-bit throughout; the 32-bit boundary lives in the fixture
I/O layer, not here.

Any op whose result contains NaN or Inf raises ``NonFiniteError`` at the op
that produced it.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class NumericsError(Exception):
    """Base class for tensor math errors."""


class ShapeError(NumericsError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(NumericsError):
    """An op produced (or was given) NaN or Inf."""


def _as_f64(data) -> Array:
    return np.asarray(data, dtype=np.float64)


def _check_finite(arr: Array, ctx: str) -> None:
    # min/max propagate NaN and expose +-Inf without allocating a bool array
    if arr.size == 0:
        return
    if not (np.isfinite(arr.min()) and np.isfinite(arr.max())):
        raise NonFiniteError(f"non-finite values produced by {ctx}")


class Tensor:
    """Immutable value node. ``_vjps`` maps each parent to its vector-Jacobian
    product; empty for leaves (constants and Parameters)."""

    __slots__ = ("data", "_vjps")

    # make ndarray <op> Tensor defer to Tensor's reflected operators
    __array_ufunc__ = None

    def __init__(self, data, _vjps: tuple = (), _ctx: str = "tensor construction"):
        arr = _as_f64(data)
        _check_finite(arr, _ctx)
        self.data = arr
        self._vjps = _vjps

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """Trainable leaf: value plus a same-shape gradient accumulator."""

    __slots__ = ("name", "grad")

    def __init__(self, value, name: str):
        super().__init__(value, _ctx=f"parameter {name!r}")
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: Array, shape: tuple) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data + b.data
    return Tensor(
        out,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(g, b.shape))),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    out = a.data - b.data
    return Tensor(
        out,
        ((a, lambda g: _unbroadcast(g, a.shape)), (b, lambda g: _unbroadcast(-g, b.shape))),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    with np.errstate(over="ignore"):
        out = a.data * b.data
    return Tensor(
        out,
        (
            (a, lambda g: _unbroadcast(g * b.data, a.shape)),
            (b, lambda g: _unbroadcast(g * a.data, b.shape)),
        ),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return Tensor(
        out,
        (
            (a, lambda g: _unbroadcast(g / b.data, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.data / (b.data * b.data), b.shape)),
        ),
        "div",
    )


def neg(a) -> Tensor:
    a = _t(a)
    return Tensor(-a.data, ((a, lambda g: -g),), "neg")


def matmul(a, b) -> Tensor:
    """Matrix product, numpy semantics: trailing two axes multiply, leading
    axes broadcast. Plain ``[m,k] @ [k,n]`` is the 2-D case."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul requires >=2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    bT = b.data.swapaxes(-1, -2)
    aT = a.data.swapaxes(-1, -2)
    return Tensor(
        out,
        (
            (a, lambda g: _unbroadcast(g @ bT, a.shape)),
            (b, lambda g: _unbroadcast(aT @ g, b.shape)),
        ),
        "matmul",
    )


def transpose_last(a) -> Tensor:
    """Swap the trailing two axes."""
    a = _t(a)
    if a.ndim < 2:
        raise ShapeError(f"transpose_last requires >=2-D, got {a.shape}")
    return Tensor(a.data.swapaxes(-1, -2), ((a, lambda g: g.swapaxes(-1, -2)),), "transpose_last")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _t(a)
    orig = a.shape
    return Tensor(a.data.reshape(shape), ((a, lambda g: g.reshape(orig)),), "reshape")


def _expand_reduced(g: Array, shape: tuple, axis, keepdims: bool) -> Array:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    if not keepdims:
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape
    return Tensor(
        out,
        ((a, lambda g: _expand_reduced(g, shape, axis, keepdims).copy()),),
        "sum",
    )


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _t(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    shape = a.shape
    count = a.data.size if axis is None else np.prod(
        [shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    inv = 1.0 / float(count)
    return Tensor(
        out,
        ((a, lambda g: _expand_reduced(g, shape, axis, keepdims) * inv),),
        "mean",
    )


def pow_const(a, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant exponent.

    ``exponent == 0`` short-circuits to ones with zero gradient (the model
    relies on this for the positive-focus term at its default setting).
    """
    a = _t(a)
    if exponent == 0:
        return Tensor(np.ones_like(a.data), ((a, lambda g: np.zeros_like(a.data)),), "pow")
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.power(a.data, exponent)
    return Tensor(
        out,
        ((a, lambda g: g * exponent * np.power(a.data, exponent - 1.0)),),
        "pow",
    )


def texp(a) -> Tensor:
    a = _t(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor(out, ((a, lambda g: g * out),), "exp")


def tlog(a) -> Tensor:
    a = _t(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return Tensor(out, ((a, lambda g: g / a.data),), "log")


def tsqrt(a) -> Tensor:
    a = _t(a)
    out = np.sqrt(a.data)
    return Tensor(out, ((a, lambda g: g * 0.5 / out),), "sqrt")


def relu(a) -> Tensor:
    a = _t(a)
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), ((a, lambda g: g * mask),), "relu")


def tabs(a) -> Tensor:
    a = _t(a)
    return Tensor(np.abs(a.data), ((a, lambda g: g * np.sign(a.data)),), "abs")


def clamp_min(a, floor: float) -> Tensor:
    """Elementwise ``max(a, floor)``; gradient passes only where ``a > floor``."""
    a = _t(a)
    mask = a.data > floor
    return Tensor(np.where(mask, a.data, floor), ((a, lambda g: g * mask),), "clamp_min")


def sigmoid_t(a) -> Tensor:
    """Elementwise logistic function on a tensor."""
    a = _t(a)
    with np.errstate(over="ignore"):
        pos = 1.0 / (1.0 + np.exp(-a.data))
        ex = np.exp(a.data)
        neg_branch = ex / (1.0 + ex)
    out = np.where(a.data >= 0, pos, neg_branch)
    return Tensor(out, ((a, lambda g: g * out * (1.0 - out)),), "sigmoid")


def sigmoid(x: float) -> float:
    """Scalar logistic function, stable for large |x|."""
    if not math.isfinite(x):
        raise NonFiniteError("sigmoid requires finite input")
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    ex = math.exp(x)
    return ex / (1.0 + ex)


def softmax_rows(a) -> Tensor:
    """Softmax along the last axis, stabilized by row-max subtraction.

    Each row of the result is nonnegative and sums to 1.
    """
    a = _t(a)
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def vjp(g: Array) -> Array:
        dot = (g * out).sum(axis=-1, keepdims=True)
        return out * (g - dot)

    return Tensor(out, ((a, vjp),), "softmax_rows")


def _topo_order(root: Tensor) -> list[Tensor]:
    """Deterministic post-order over the graph reachable from ``root``."""
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
        for parent, _ in node._vjps:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(param) into every reachable ``Parameter.grad``.

    ``loss`` must be scalar. Repeated calls without ``zero_grad`` add up
    (gradients accumulate, they are not overwritten).
    """
    if not isinstance(loss, Tensor):
        raise NumericsError("backward expects a Tensor")
    if loss.size != 1:
        raise NumericsError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = _topo_order(loss)
    grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._vjps:
            pg = vjp(g)
            acc = grads.get(id(parent))
            if acc is None:
                grads[id(parent)] = pg if pg.flags.owndata else pg.copy()
            else:
                acc += pg
    for node in order:
        if isinstance(node, Parameter):
            g = grads.get(id(node))
            if g is not None:
                node.grad += g


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def finite_difference(
    fn: Callable[[], float],
    params: Sequence[Parameter],
    eps: float = 1e-5,
) -> list[Array]:
    """Central-difference gradients of ``fn()`` w.r.t. each parameter.

    Independent oracle for the analytic backward pass: perturbs one entry at
    a time and re-evaluates. Used by tests and the gradcheck driver.
    """
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = fn()
            flat[i] = orig - eps
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * eps)
        grads.append(g)
    return grads


def max_relative_error(analytic: Array, numeric: Array, floor: float = 1e-6) -> float:
    """Max elementwise |a-n| / max(|a|, |n|, floor).

    The floor keeps near-zero gradients from inflating the ratio with
    finite-difference roundoff noise.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
