"""Differentiable operations on :class:`Tensor`.

Binary ops accept equal shapes or a size-1 operand (scalar broadcast only).
"""
from __future__ import annotations

import builtins

import numpy as np
import scipy.sparse as sp

from .tensor import DimensionError, Tensor, as_tensor, make_op


def _check_binary(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} do not match")


def _unbroadcast(g: np.ndarray, like: Tensor) -> np.ndarray:
    if g.shape == like.shape:
        return g
    return np.asarray(g.sum()).reshape(like.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")
    return make_op(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "div")
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b))

    return make_op(out, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


# -- unary -------------------------------------------------------------------

def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return make_op(out, (a,), lambda g: (g * out * (1.0 - out),))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_op(out, (a,), lambda g: (g * 0.5 / out,))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sin(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def clamp(a, lo, hi) -> Tensor:
    """Clamp to ``[lo, hi]``; gradient passes only strictly inside the bounds."""
    a = as_tensor(a)
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), a.shape)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), a.shape)
    inside = (a.data > lo) & (a.data < hi)
    return make_op(np.minimum(np.maximum(a.data, lo), hi), (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "relu": relu, "tanh": tanh, "sigmoid": sigmoid, "abs": abs,
    "add": add, "sub": sub, "mul": mul, "scale": scale,
}


def elementwise(op: str, *args) -> Tensor:
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dimensions must be identical."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward)


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Product of a constant sparse matrix with a dense 2-D tensor."""
    x = as_tensor(x)
    if x.ndim != 2 or matrix.shape[1] != x.shape[0]:
        raise DimensionError(f"spmm: cannot multiply {matrix.shape} by {x.shape}")
    mt = matrix.T.tocsr()
    return make_op(np.asarray(matrix @ x.data), (x,), lambda g: (np.asarray(mt @ g),))


# -- reductions -------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def _expand_back(g, shape, axes, keepdims):
    if not keepdims:
        for ax in axes:
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum(a, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    return make_op(out, (a,), lambda g: (_expand_back(g, a.shape, axes, keepdims).copy(),))


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if a.size == 0 or n == 0:
        raise DimensionError("mean of an empty tensor")
    out = a.data.mean(axis=axes, keepdims=keepdims)
    return make_op(out, (a,), lambda g: (_expand_back(g, a.shape, axes, keepdims) / n,))


def l1_norm(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    sign = np.sign(a.data)
    out = np.abs(a.data).sum(axis=axes, keepdims=keepdims)
    return make_op(out, (a,), lambda g: (_expand_back(g, a.shape, axes, keepdims) * sign,))


def reduce(op: str, t, axis=None) -> Tensor:
    fns = {"sum": sum, "mean": mean, "l1_norm": l1_norm}
    if op not in fns:
        raise ValueError(f"unknown reduction {op!r}")
    return fns[op](t, axis=axis)


# -- shape manipulation -------------------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_op(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_op(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with integer arrays, not Tensors")
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_op(out, (a,), backward)


def take_rows(a, idx) -> Tensor:
    """Gather rows ``a[idx]`` (idx an integer array of any shape)."""
    a = as_tensor(a)
    idx = np.asarray(idx, dtype=np.int64)
    out = a.data[idx]
    n = a.shape[0]

    def backward(g):
        flat = g.reshape(idx.size, -1)
        acc = np.zeros((n, flat.shape[1]))
        for col in range(flat.shape[1]):
            acc[:, col] = np.bincount(idx.reshape(-1), weights=flat[:, col], minlength=n)
        return (acc.reshape(a.shape),)

    return make_op(out, (a,), backward)


def concat(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0]
    axis = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(
            t.shape[d] != ref.shape[d] for d in range(ref.ndim) if d != axis
        ):
            raise DimensionError(f"concat: incompatible shapes {ref.shape} and {t.shape}")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return make_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors, axis=0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise DimensionError(f"stack: shapes {shape} and {t.shape} differ")
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return make_op(out, tensors,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in builtins.range(n)))


# -- images ------------------------------------------------------------------------

def _window_view(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1: stride, : (wo - 1) * stride + 1: stride]


def conv2d(x, kernel, bias=None, stride: int = 1, padding: str = "same") -> Tensor:
    """2-D cross-correlation of a ``C×H×W`` input with an ``O×C×k×k`` kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    k = kernel.shape[2]
    if kernel.shape[3] != k or k % 2 == 0:
        raise DimensionError("conv2d: kernel must be square with odd size")
    if padding == "same":
        pad = k // 2
    elif padding == "valid":
        pad = 0
    else:
        raise ValueError(f"padding must be 'same' or 'valid', not {padding!r}")
    c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    if k > hp or k > wp:
        raise DimensionError(f"conv2d: kernel {k}x{k} larger than padded input {hp}x{wp}")
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # im2col: rows ordered (channel, dy, dx), columns are output pixels
    win = _window_view(xp, k, stride, ho, wo)
    cols = np.ascontiguousarray(win.transpose(0, 3, 4, 1, 2)).reshape(c * k * k, ho * wo)
    o = kernel.shape[0]
    kmat = kernel.data.reshape(o, c * k * k)
    out = (kmat @ cols).reshape(o, ho, wo)
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} != ({o},)")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        g2 = g.reshape(o, ho * wo)
        gk = (g2 @ cols.T).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (kmat.T @ g2).reshape(c, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, a: a + (ho - 1) * stride + 1: stride,
                        b: b + (wo - 1) * stride + 1: stride] += gcols[:, a, b]
            gx = gxp[:, pad: pad + h, pad: pad + w] if pad else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return make_op(out, parents, backward)


def upsample_nearest(x, factor: int = 2) -> Tensor:
    x = as_tensor(x)
    c, h, w = x.shape
    out = x.data.repeat(factor, axis=1).repeat(factor, axis=2)
    return make_op(out, (x,),
                   lambda g: (g.reshape(c, h, factor, w, factor).sum(axis=(2, 4)),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward sums over expanded axes."""
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    lead = len(shape) - a.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_op(out.copy(), (a,), backward)
