"""Differentiable operations on :class:`~harmonet.autodiff.tensor.Tensor`.

Image-like tensors are channel-first: ``[C, H, W]`` for a single map or
``[B, C, H, W]`` for a stack. Convolution is cross-correlation, the usual
deep-learning convention (no kernel flip).
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, as_tensor, record


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise -------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data + b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return record(a.data - b.data, (a, b),
                  lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b),
                  lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return record(out, (a, b), vjp, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),), "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record(np.log(ad), (a,), lambda g: (g / ad,), "log")


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
    return record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return record(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to ``[lo, hi]``; the gradient is zero where the clip is active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clamp")


def bce_with_logits(logits, target) -> Tensor:
    """Elementwise binary cross-entropy ``-t log s(l) - (1-t) log(1-s(l))``."""
    logits, target = as_tensor(logits), as_tensor(target)
    l, t = logits.data, target.data
    out = np.maximum(l, 0.0) - l * t + np.log1p(np.exp(-np.abs(l)))
    s = _sigmoid(l)

    def vjp(g):
        return (unbroadcast(g * (s - t), l.shape),
                unbroadcast(-g * l, t.shape))

    return record(out, (logits, target), vjp, "bce_with_logits")


# -- reductions and shape ----------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return record(out, (a,), vjp, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if n == 0:
        raise ShapeError("mean over an empty axis")
    return mul(sum(a, axis=axes, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return record(np.broadcast_to(a.data, shape).copy(), (a,),
                  lambda g: (unbroadcast(g, old),), "broadcast_to")


def index(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    parts = idx if isinstance(idx, tuple) else (idx,)
    basic = all(isinstance(p, (int, slice)) or p is Ellipsis or p is None for p in parts)

    def vjp(g):
        full = np.zeros(shape)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return record(np.array(a.data[idx]), (a,), vjp, "index")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of an empty list")
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim:
            raise ShapeError(f"concat rank mismatch: {t.ndim} vs {ts[0].ndim}")
        for d in range(t.ndim):
            if d != ax and t.shape[d] != ts[0].shape[d]:
                raise ShapeError(f"concat mismatch in dimension {d}: {t.shape[d]} vs {ts[0].shape[d]}")
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    return record(np.concatenate([t.data for t in ts], axis=ax), ts, vjp, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in ts]
    return concat(expanded, axis=axis)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimension mismatch: {a.shape[-1]} vs {b.shape[-2]}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(ga, ad.shape), unbroadcast(gb, bd.shape)

    return record(ad @ bd, (a, b), vjp, "matmul")


# -- neural-network primitives ---------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.ndim == 0 or a.shape[axis] == 0:
        raise ShapeError("softmax over an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), vjp, "softmax")


def scaled_dot_attention(q, k, v) -> Tensor:
    """``softmax(q k^T / sqrt(d)) v`` with the softmax over key positions.

    Shapes ``q [..., M, Dh]``, ``k [..., L, Dh]``, ``v [..., L, Dv]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if k.shape[-2] == 0:
        raise ShapeError("attention over zero keys")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {q.shape[-1]} vs {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value length mismatch: {k.shape[-2]} vs {v.shape[-2]}")
    scores = matmul(q, transpose(k, _swap_last(k.ndim))) * (1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, axis=-1), v)


def _swap_last(ndim):
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def global_avg_pool(x) -> Tensor:
    """Mean over the two trailing (spatial) axes: ``[.., C, H, W] -> [.., C]``."""
    x = as_tensor(x)
    if x.ndim < 3 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ShapeError(f"global_avg_pool expects [.., C, H, W], got {x.shape}")
    return mean(x, axis=(-2, -1))


def avg_pool2d(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    *lead, H, W = x.shape
    if H % k or W % k:
        raise ShapeError(f"avg_pool2d: spatial size {H}x{W} not divisible by {k}")
    out = x.data.reshape(*lead, H // k, k, W // k, k).mean(axis=(-3, -1))

    def vjp(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (g / (k * k),)

    return record(out, (x,), vjp, "avg_pool2d")


def upsample_nearest(x, k: int = 2) -> Tensor:
    x = as_tensor(x)
    *lead, H, W = x.shape
    out = np.repeat(np.repeat(x.data, k, axis=-2), k, axis=-1)

    def vjp(g):
        return (g.reshape(*lead, H, k, W, k).sum(axis=(-3, -1)),)

    return record(out, (x,), vjp, "upsample_nearest")


def _im2col(xp, kh, kw, stride, dilation, Ho, Wo):
    B, C = xp.shape[:2]
    cols = np.empty((B, C, kh, kw, Ho, Wo))
    hspan = stride * (Ho - 1) + 1
    wspan = stride * (Wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            hi, wj = i * dilation, j * dilation
            cols[:, :, i, j] = xp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride]
    return cols


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0,
           dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation.

    ``x`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``; ``weight`` is
    ``[C_out, C_in // groups, kh, kw]``; ``bias`` is ``[C_out]`` or None.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv2d input must be [C,H,W] or [B,C,H,W], got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d kernel must be [C_out,C_in/groups,kh,kw], got {weight.shape}")
    B, C, H, W = xd.shape
    O, Cg, kh, kw = weight.shape
    if C % groups:
        raise ShapeError(f"conv2d: input channels {C} not divisible by groups {groups}")
    if O % groups:
        raise ShapeError(f"conv2d: output channels {O} not divisible by groups {groups}")
    if Cg != C // groups:
        raise ShapeError(f"conv2d: kernel input-channel dimension {Cg} != C_in/groups = {C // groups}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({O},)")
    num_h = H + 2 * padding - dilation * (kh - 1) - 1
    num_w = W + 2 * padding - dilation * (kw - 1) - 1
    if num_h < 0 or num_w < 0 or num_h % stride or num_w % stride:
        raise ShapeError(f"conv2d: output extent not a positive integer for H={H}, W={W}, "
                         f"kernel {kh}x{kw}, padding {padding}, dilation {dilation}, stride {stride}")
    Ho, Wo = num_h // stride + 1, num_w // stride + 1
    G, Og = groups, O // groups
    Kc = Cg * kh * kw

    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    if pointwise:
        cols = xd.reshape(B, G, Kc, Ho * Wo)
    else:
        xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
        cols = _im2col(xp, kh, kw, stride, dilation, Ho, Wo).reshape(B, G, Kc, Ho * Wo)
    wd = weight.data.reshape(G, Og, Kc)
    out = np.matmul(wd[None], cols).reshape(B, O, Ho, Wo)
    if bias is not None:
        out += bias.data[None, :, None, None]
    if single:
        out = out[0]

    def vjp(g):
        g4 = g[None] if single else g
        gg = g4.reshape(B, G, Og, Ho * Wo)
        gw = np.matmul(gg, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        gcols = np.matmul(np.swapaxes(wd, -1, -2)[None], gg)
        if pointwise:
            gx = gcols.reshape(B, C, H, W)
        else:
            gcols = gcols.reshape(B, C, kh, kw, Ho, Wo)
            gxp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
            hspan = stride * (Ho - 1) + 1
            wspan = stride * (Wo - 1) + 1
            for i in range(kh):
                for j in range(kw):
                    hi, wj = i * dilation, j * dilation
                    gxp[:, :, hi:hi + hspan:stride, wj:wj + wspan:stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if single:
            gx = gx[0]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, vjp, "conv2d")


def linear(x, weight, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``[in, out]``."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)
