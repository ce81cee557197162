"""Differentiable primitives.

Each op computes its forward value with numpy and, if any input requires a
gradient and a tape is active, records a closure mapping the output adjoint
to input adjoints. Broadcasting is supported only where the model needs it
(bias adds, embedding adds, attention masks); adjoints of broadcast inputs
are summed back to the input shape.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy import special

from . import tensor as _t
from .tensor import Node, Tensor

ArrayLike = Tensor | np.ndarray | float


def as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _publish(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    if _t.CHECK_FINITE and not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = _t.active_tape()
    if needs and tape is not None:
        tape.record(Node(op, tuple(inputs), out, backward))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {list(a.shape)} and {list(b.shape)} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _publish("add", a.data + b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _publish("sub", a.data - b.data, (a, b),
                    lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _publish("mul", a.data * b.data, (a, b),
                    lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _publish("scale", a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: shapes {list(a.shape)} and {list(b.shape)} do not conform")

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _publish("matmul", a.data @ b.data, (a, b), back)


# ------------------------------------------------------------------- shaping


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {list(a.shape)} as {list(shape)}") from None
    return _publish("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {list(a.shape)}")
    inv = tuple(np.argsort(axes))
    return _publish("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ValueError(f"broadcast_to: {list(a.shape)} -> {list(shape)}") from None
    return _publish("broadcast_to", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat: no inputs")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            i != ax and n != m for i, (n, m) in enumerate(zip(t.shape, tensors[0].shape))
        ):
            raise ValueError(
                f"concat: shapes {[list(x.shape) for x in tensors]} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _publish("concat", np.concatenate([t.data for t in tensors], axis=ax), tensors, back)


def slice_(a: Tensor, key) -> Tensor:
    """Basic (non-fancy) slicing."""

    def back(g):
        ga = np.zeros_like(a.data, dtype=g.dtype)
        ga[key] = g
        return (ga,)

    return _publish("slice", np.ascontiguousarray(a.data[key]), (a,), back)


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Per-batch gather along axis 1: out[b, j] = a[b, index[b, j]].

    ``a`` is [B, N, ...] and ``index`` an integer array [B, K].
    """
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 2 or a.ndim < 2 or index.shape[0] != a.shape[0]:
        raise ValueError(f"gather: index {list(index.shape)} incompatible with {list(a.shape)}")
    if index.size and (index.min() < 0 or index.max() >= a.shape[1]):
        raise IndexError(f"gather: index out of range for axis of length {a.shape[1]}")
    rows = np.arange(a.shape[0])[:, None]
    out = a.data[rows, index]

    def back(g):
        ga = np.zeros_like(a.data, dtype=g.dtype)
        np.add.at(ga, (np.broadcast_to(rows, index.shape), index), g)
        return (ga,)

    return _publish("gather", out, (a,), back)


# ---------------------------------------------------------------- reductions


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.data.dtype),)

    return _publish("sum", np.asarray(out), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([a.shape[i] for i in axes]))
    out = a.data.mean(axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.data.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, a.shape).astype(a.data.dtype),)

    return _publish("mean", np.asarray(out), (a,), back)


# ------------------------------------------------------------- nonlinearities


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the optional affine map."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True, dtype=np.float64)
    var = ((xd - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xd - mu) * inv).astype(xd.dtype)
    out = xhat
    if weight is not None:
        out = out * weight.data
    if bias is not None:
        out = out + bias.data
    d = xd.shape[-1]

    def back(g):
        gw = gb = None
        if bias is not None:
            gb = _unbroadcast(g, bias.shape)
        if weight is not None:
            gw = _unbroadcast(g * xhat, weight.shape)
            g = g * weight.data
        gx = (inv / d) * (d * g - g.sum(-1, keepdims=True) - xhat * (g * xhat).sum(-1, keepdims=True))
        return gx.astype(xd.dtype), gw, gb

    placeholder = Tensor(np.zeros(0, dtype=xd.dtype))
    inputs = (x, weight if weight is not None else placeholder,
              bias if bias is not None else placeholder)
    return _publish("layer_norm", out, inputs, back)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _publish("softmax", y, (x,), back)


_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + special.erf(x * _SQRT_HALF)) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    y = (0.5 * xd * (1.0 + special.erf(xd * _SQRT_HALF))).astype(xd.dtype)
    return _publish("gelu", y, (x,), lambda g: (g * _gelu_grad(xd).astype(xd.dtype),))


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; the identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng stream")
    keep = (rng.random(x.shape) >= p).astype(x.data.dtype) / x.data.dtype.type(1.0 - p)
    return _publish("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# -------------------------------------------------------------------- losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over a [B, C] batch of logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ValueError(f"cross_entropy: logits {list(logits.shape)} vs labels {list(labels.shape)}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ValueError(f"cross_entropy: label outside [0, {logits.shape[1]})")
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    b = logits.shape[0]
    loss = -logp[np.arange(b), labels].mean()

    def back(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        return ((g * p / b).astype(logits.data.dtype),)

    return _publish("cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), back)
