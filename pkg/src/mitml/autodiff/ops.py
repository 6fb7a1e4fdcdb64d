"""Differentiable operations.

Binary elementwise ops require equal shapes; the only implicit broadcast is a
Python scalar constant. Anything that needs replication goes through ``expand``
or ``linear`` so the replication is explicit in the graph.
"""

from __future__ import annotations

from numbers import Real
from typing import Optional, Sequence

import numpy as np

from mitml import kernels
from mitml.autodiff.tensor import ShapeError, Tensor, as_tensor, make_result

L2_EPS = 1e-12


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _axis(x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        c = float(b)
        return make_result(a.data + c, (a,), lambda g: (g,))
    b = as_tensor(b)
    _check_same(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return add(a, -float(b))
    b = as_tensor(b)
    _check_same(a, b, "sub")
    return make_result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if isinstance(b, Real):
        return scale(a, float(b))
    b = as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so neither branch overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_result(y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return make_result(y, (a,), lambda g: (g * (1.0 - y * y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return make_result(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result(np.log(x), (a,), lambda g: (g / x,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return make_result(y, (a,), lambda g: (g * 0.5 / y,))


def square(a: Tensor) -> Tensor:
    x = a.data
    return make_result(x * x, (a,), lambda g: (2.0 * g * x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    mask = a.data > floor
    return make_result(np.where(mask, a.data, floor), (a,), lambda g: (g * mask,))


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def elementwise(op_kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, relu, sigmoid, tanh, scale-by-constant."""
    if op_kind in _BINARY:
        if b is None:
            raise ValueError(f"{op_kind} needs a second operand")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    if op_kind in ("scale", "scale-by-constant"):
        if not isinstance(b, Real):
            raise TypeError("scale-by-constant needs a numeric constant")
        return scale(a, b)
    raise ValueError(f"unknown elementwise op {op_kind!r}")


# -- linear algebra ------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight stored as (out, in).

    ``x`` may be a single vector (in,) or a row batch (n, in).
    """
    vector = x.ndim == 1
    xd = x.data.reshape(1, -1) if vector else x.data
    if weight.ndim != 2 or xd.ndim != 2 or xd.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    wd = weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    if vector:
        out = out.reshape(-1)

    def backward(g):
        g2 = g.reshape(1, -1) if vector else g
        gx = g2 @ wd
        gw = g2.T @ xd
        grads = [gx.reshape(x.shape), gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, zero_pad: int = 0) -> Tensor:
    """Direct 2-D convolution (cross-correlation) of an N×C×H×W batch."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    o, ck, kh, kw = weight.shape
    if c != ck:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if bias.shape != (o,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {o} output channels")
    if stride < 1 or zero_pad < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    span_h, span_w = h + 2 * zero_pad - kh, w + 2 * zero_pad - kw
    # floor semantics: windows that would overrun the padded border are dropped
    if span_h < 0 or span_w < 0:
        raise ShapeError(
            f"conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}, "
            f"stride {stride}, pad {zero_pad}"
        )
    ho, wo = span_h // stride + 1, span_w // stride + 1
    cols = kernels.im2col(np.ascontiguousarray(x.data), kh, kw, stride, zero_pad)
    wmat = weight.data.reshape(o, -1)
    out = (cols @ wmat.T + bias.data).reshape(n, ho, wo, o).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        gb = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gx = kernels.col2im(np.ascontiguousarray(g2 @ wmat), n, c, h, w, kh, kw, stride, zero_pad)
        return gx, gw, gb

    return make_result(np.ascontiguousarray(out), (x, weight, bias), backward)


# -- reductions ----------------------------------------------------------------


def sum(x: Tensor, axis: Optional[int] = None) -> Tensor:  # noqa: A001
    if axis is None:
        return make_result(np.array([x.data.sum()]), (x,), lambda g: (np.full(x.shape, g[0]),))
    ax = _axis(x, axis)
    if x.ndim == 1:
        return sum(x)

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

    return make_result(x.data.sum(axis=ax), (x,), backward)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    count = x.size if axis is None else x.shape[_axis(x, axis)]
    return scale(sum(x, axis), 1.0 / count)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first maximal entry."""
    ax = _axis(x, axis)
    idx = np.expand_dims(x.data.argmax(axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax)

    def backward(g):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, idx, g.reshape(idx.shape), axis=ax)
        return (gx,)

    out = out.reshape(-1) if x.ndim == 1 else np.squeeze(out, ax)
    return make_result(out, (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)
    return make_result(y, (x,), lambda g: (y * (g - (g * y).sum(axis=ax, keepdims=True)),))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return make_result(y, (x,), lambda g: (g - p * g.sum(axis=ax, keepdims=True),))


def l2_normalize(x: Tensor, axis: int = -1, eps: float = L2_EPS) -> Tensor:
    """Scale to unit norm along ``axis``; norms below ``eps`` are floored to ``eps``."""
    ax = _axis(x, axis)
    norm = np.sqrt((x.data * x.data).sum(axis=ax, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = (g * y).sum(axis=ax, keepdims=True)
        return (np.where(big, (g - y * proj) / denom, g / eps),)

    return make_result(y, (x,), backward)


_REDUCTIONS = {
    "mean": mean,
    "sum": sum,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "l2_normalize": l2_normalize,
}


def reduce(op_kind: str, x: Tensor, axis: int) -> Tensor:
    """Dispatch by name: mean, sum, softmax, log_softmax, l2_normalize."""
    try:
        fn = _REDUCTIONS[op_kind]
    except KeyError:
        raise ValueError(f"unknown reduction {op_kind!r}") from None
    _axis(x, axis)
    return fn(x, axis)


# -- shape manipulation -----------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),))


def index(x: Tensor, key) -> Tensor:
    out = x.data[key]
    if not isinstance(out, np.ndarray) or out.ndim == 0:
        out = np.array([out])

    def backward(g):
        gx = np.zeros(x.shape)
        np.add.at(gx, key, g.reshape(np.shape(x.data[key])))
        return (gx,)

    return make_result(np.array(out), (x,), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim

    def backward(g):
        return [np.take(g, i, axis=ax) for i in range(len(tensors))]

    return make_result(out, tuple(tensors), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=ax)

    return make_result(out, tuple(tensors), backward)


def expand(x: Tensor, axis: int, size: int) -> Tensor:
    """Insert a new ``axis`` and repeat ``x`` ``size`` times along it."""
    out = np.repeat(np.expand_dims(x.data, axis), size, axis=axis)
    ax = axis % out.ndim
    return make_result(out, (x,), lambda g: (g.sum(axis=ax),))


def detach(x: Tensor) -> Tensor:
    return x.detach()
