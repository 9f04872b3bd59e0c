"""Differentiable forward ops.

Each op returns a new :class:`Tensor` whose backward closure yields one
gradient (or ``None``) per parent, already reduced to the parent's shape.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, get_default_dtype


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else get_default_dtype()
    return Tensor(np.asarray(x, dtype=dtype))


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, _lift(b, a)
    b = _lift(b)
    return _lift(a, b), b


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise binary --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data + b.data, (a, b),
                           lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._from_op(a.data - b.data, (a, b),
                           lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return (unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return Tensor._from_op(ad * bd, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd

    def back(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(out, (a, b), back, "div")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def pow(a, exponent) -> Tensor:
    """``a ** exponent``; exponent may be a python scalar or a tensor.

    For tensor exponents the gradient w.r.t. the exponent uses ``log(a)``
    and is defined as 0 where ``a == 0``.
    """
    a = _lift(a)
    if not isinstance(exponent, Tensor):
        p = float(exponent)
        ad = a.data
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = ad ** p

        def back(g):
            if p == 0:
                return (np.zeros_like(ad),)
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                return (g * p * ad ** (p - 1),)

        return Tensor._from_op(out, (a,), back, "pow")

    e = _lift(exponent, a)
    _broadcast_shape("pow", a, e)
    ad, ed = a.data, e.data
    with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
        out = ad ** ed

    def back_t(g):
        ga = gb = None
        with np.errstate(divide="ignore", invalid="ignore", over="ignore", under="ignore"):
            if a.requires_grad:
                local = np.where(ad == 0, np.where(ed == 1, 1.0, 0.0), ed * out / np.where(ad == 0, 1, ad))
                ga = unbroadcast(g * local.astype(ad.dtype), ad.shape)
            if e.requires_grad:
                logs = np.log(np.where(ad > 0, ad, 1))
                gb = unbroadcast(g * np.where(ad > 0, out * logs, 0).astype(ad.dtype), ed.shape)
        return ga, gb

    return Tensor._from_op(out, (a, e), back_t, "pow")


def maximum(a: Tensor, value: float) -> Tensor:
    """Max with a scalar; subgradient 1 at the tie."""
    ad = a.data
    mask = ad >= value
    return Tensor._from_op(np.where(mask, ad, np.asarray(value, ad.dtype)), (a,),
                           lambda g: (g * mask,), "maximum")


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip to ``[lo, hi]``; gradient 1 on the closed interval, 0 outside."""
    ad = a.data
    mask = np.ones(ad.shape, dtype=bool)
    out = ad
    if lo is not None:
        mask &= ad >= lo
        out = np.maximum(out, np.asarray(lo, ad.dtype))
    if hi is not None:
        mask &= ad <= hi
        out = np.minimum(out, np.asarray(hi, ad.dtype))
    if out is ad:
        out = ad.copy()
    return Tensor._from_op(out, (a,), lambda g: (g * mask,), "clamp")


# -- elementwise unary ---------------------------------------------------

def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return Tensor._from_op(out, (a,), lambda g: (g / ad,), "log")


def abs(a: Tensor) -> Tensor:
    ad = a.data
    return Tensor._from_op(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def sigmoid(a: Tensor) -> Tensor:
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ex = np.exp(ad[~pos])
    out[~pos] = ex / (1.0 + ex)
    return Tensor._from_op(out, (a,), lambda g: (g * out * (1 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    mask = ad > 0
    return Tensor._from_op(ad * mask, (a,), lambda g: (g * mask,), "relu")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


# -- reductions ----------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    shape = a.shape
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._from_op(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    shape = a.shape
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=a.dtype), (a,), back, "mean")


def l2norm(a: Tensor, axis=-1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient is undefined at zero."""
    ad = a.data
    n = np.sqrt((ad * ad).sum(axis=axis, keepdims=True))

    def back(g):
        gk = g if keepdims else np.expand_dims(g, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (gk * ad / n,)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return Tensor._from_op(out, (a,), back, "l2norm")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    ad = a.data
    shifted = ad - ad.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor._from_op(out, (a,), back, "log_softmax")


# -- shape ops -----------------------------------------------------------

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", src, tuple(shape)) from None
    return Tensor._from_op(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is not None and len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._from_op(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError("broadcast", a.shape, shape) from None
    src = a.shape
    return Tensor._from_op(out, (a,), lambda g: (unbroadcast(g, src),), "broadcast")


def slice(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    out = a.data[index]
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

    def back(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._from_op(np.array(out), (a,), back, "slice")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat", datas[0].shape, datas[-1].shape) from None
    bounds = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._from_op(out, tensors, back, "concat")


# -- linear algebra ------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return Tensor._from_op(ad @ bd, (a, b), back, "matmul")


def _im2col(xp: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Gather ``[C*k*k, N*Ho*Wo]`` patch columns from a padded input."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * k * k, n * ho * wo), ho, wo


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation over ``[N, C, H, W]`` inputs with zero padding."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    o, c, k, k2 = weight.shape
    if k != k2:
        raise ShapeError("conv2d", x.shape, weight.shape, "square kernels only")
    xd = x.data
    n, _, h, w = xd.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise ShapeError("conv2d", x.shape, weight.shape, "kernel larger than padded input")
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols, ho, wo = _im2col(xp, k, stride)
    wmat = weight.data.reshape(o, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(o, n, ho, wo).transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(o, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (wmat.T @ g2).reshape(c, k, k, n, ho, wo)
            acc = np.zeros((c, n) + xp.shape[2:], dtype=xd.dtype)
            for i in range(k):
                for j in range(k):
                    acc[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, i, j]
            if padding:
                acc = acc[:, :, padding:padding + h, padding:padding + w]
            gx = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=1)

    return Tensor._from_op(out, parents, back, "conv2d")


def avgpool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping average pooling (stride == kernel)."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError("avgpool2d", x.shape, detail=f"spatial size not divisible by {kernel}")
    out = x.data.reshape(n, c, h // kernel, kernel, w // kernel, kernel).mean(axis=(3, 5))
    scale = 1.0 / (kernel * kernel)

    def back(g):
        up = np.repeat(np.repeat(g, kernel, axis=2), kernel, axis=3)
        return (up * np.asarray(scale, g.dtype),)

    return Tensor._from_op(out, (x,), back, "avgpool2d")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5):
    """Normalize ``[N, C, ...]`` per channel with batch statistics.

    Returns the output tensor plus the batch mean and (biased) variance as
    plain arrays for running-average bookkeeping.
    """
    xd = x.data
    axes = (0,) + tuple(range(2, xd.ndim))
    bshape = (1, -1) + (1,) * (xd.ndim - 2)
    m = xd.size // xd.shape[1]
    mu = xd.mean(axis=axes, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data.reshape(bshape)
    out = xhat * gd + beta.data.reshape(bshape)

    def back(g):
        gg = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
        gb = g.sum(axis=axes) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gd
            gx = (inv / m) * (m * gxhat - gxhat.sum(axis=axes, keepdims=True)
                              - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True))
        return gx, gg, gb

    return Tensor._from_op(out, (x, gamma, beta), back, "batch_norm"), mu.reshape(-1), var.reshape(-1)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy over a batch of ``[N, K]`` logits."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    lp = log_softmax(logits, axis=1)
    picked = slice(lp, (np.arange(len(labels)), labels))
    return neg(mean(picked))
