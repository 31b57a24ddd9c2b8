"""Differentiable operations over :class:`~mga.tensor.Tensor`.

Elementwise binary ops follow numpy broadcasting; their backward passes sum
the gradient back down to each operand's shape.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import NORM_FLOOR, DomainError, ShapeError, Tensor, active_tape, as_tensor

__all__ = [
    "forward",
    "matmul",
    "add",
    "subtract",
    "multiply",
    "divide",
    "scale",
    "exp",
    "log",
    "tanh",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "l2_normalize",
    "transpose",
    "reshape",
    "concat",
    "take",
    "mask_fill",
]


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out = Tensor(data, requires_grad=True)
        tape.record(kind, out, inputs, backward_fn)
        return out
    return Tensor(data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def matmul(a, b) -> Tensor:
    """Matrix product with optional leading batch axes.

    Either both operands share identical leading axes, or ``b`` is a plain
    matrix applied to every leading index of ``a``.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    if b.ndim == 2 and a.ndim > 2:
        lead = a.shape[:-1]
        flat = a.data.reshape(-1, a.shape[-1])
        data = (flat @ b.data).reshape(*lead, b.shape[-1])

        def back(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = flat.T @ g2 if b.requires_grad else None
            return ga, gb
    else:
        data = a.data @ b.data

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _emit("matmul", data, (a, b), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("subtract", a, b)
    return _emit("subtract", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("multiply", a, b)
    return _emit("multiply", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def divide(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("divide", a, b)
    if np.any(b.data == 0):
        raise DomainError("divide: zero denominator")
    out = a.data / b.data
    return _emit("divide", out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def scale(a, factor: float) -> Tensor:
    a = as_tensor(a)
    factor = float(factor)
    return _emit("scalar-multiply", a.data * factor, (a,), lambda g: (g * factor,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        idx = np.unravel_index(int(np.argmax(a.data <= 0)), a.shape) if a.ndim else ()
        raise DomainError(f"log: non-positive value at index {idx}")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _emit("sum", np.asarray(out), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = a.size if axes is None else int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _emit("mean", np.asarray(out), (a,), back)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", out, (a,), back)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _emit("log-softmax", out, (a,), back)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Divide by the l2 norm along ``axis``; the norm is floored at 1e-12."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, NORM_FLOOR)
    out = a.data / denom
    floored = norm < NORM_FLOOR

    def back(g):
        proj = (g * out).sum(axis=axis, keepdims=True)
        ga = (g - np.where(floored, 0.0, out * proj)) / denom
        return (ga,)

    return _emit("l2-normalize", out, (a,), back)


def transpose(a, axes=None) -> Tensor:
    """Reverse the last two axes, or apply an explicit permutation."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise ShapeError("transpose", a.shape)
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _emit("reshape", data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in ts]) from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", data, ts, back)


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather entries along ``axis``; the gradient scatters back and adds."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)
    axis = axis % a.ndim
    data = np.take(a.data, idx, axis=axis)

    def back(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        return (ga,)

    return _emit("take", data, (a,), back)


def mask_fill(a, keep, value: float = 0.0) -> Tensor:
    """Replace entries where ``keep`` is false by ``value``.

    ``keep`` broadcasts against ``a``; filled entries pass no gradient.
    """
    a = as_tensor(a)
    keep = np.asarray(keep, dtype=bool)
    try:
        keep = np.broadcast_to(keep, a.shape)
    except ValueError:
        raise ShapeError("mask-fill", a.shape, keep.shape) from None
    data = np.where(keep, a.data, float(value))
    return _emit("mask-fill", data, (a,), lambda g: (np.where(keep, g, 0.0),))


_KINDS = {
    "matmul": matmul,
    "add": add,
    "subtract": subtract,
    "multiply": multiply,
    "divide": divide,
    "scalar-multiply": scale,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "sum": sum,
    "mean": mean,
    "softmax": softmax,
    "log-softmax": log_softmax,
    "l2-normalize": l2_normalize,
    "transpose": transpose,
    "reshape": reshape,
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "take": take,
    "mask-fill": mask_fill,
}


def forward(kind: str, *inputs, **attrs) -> Tensor:
    """Dispatch an operation by its kind name."""
    try:
        fn = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown operation kind {kind!r}") from None
    return fn(*inputs, **attrs)
