"""Differentiable primitives over :class:`~scopeformer.tensor.Tensor`.

Every function returns a new tensor and, when a tape is active and any input
requires grad, records a vector-Jacobian product for the reverse pass.
Elementwise ops broadcast with numpy semantics; their vjps sum the incoming
gradient back over the broadcast axes.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
from scipy.special import erf

from .tensor import Tensor, TensorError, record

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `g` down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return record(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data)

    def vjp(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return record(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return record(out, (a, b), vjp)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data ** exponent)
    return record(out, (a,),
                  lambda g: (g * exponent * a.data ** (exponent - 1.0),))


def log(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.exp(a.data))
    return record(out, (a,), lambda g: (g * out.data,))


def clip(a, low: float, high: float) -> Tensor:
    """Clamp values; gradient passes only through the interior."""
    a = _as_tensor(a)
    out = Tensor(np.clip(a.data, low, high))
    inside = (a.data > low) & (a.data < high)
    return record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# activations

def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    mask = a.data > 0
    return record(out, (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    y = 1.0 / (1.0 + np.exp(-np.clip(a.data, -60.0, 60.0)))
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * out.data * (1.0 - out.data),))


def gelu(a) -> Tensor:
    """Exact erf form: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = Tensor(x * phi)

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (phi + x * pdf),)

    return record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# reductions

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    collapsed = out_data.ndim == 0
    if collapsed:
        out_data = out_data.reshape(1)
    out = Tensor(out_data)

    def vjp(g):
        if axis is None or collapsed:
            return (np.broadcast_to(g.reshape(()), a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)

    return record(out, (a,), vjp)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product; ranks 2-4 with numpy batch broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise TensorError("matmul requires rank >= 2 operands")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(
            f"matmul inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def vjp(g):
        da = db = None
        if a.requires_grad:
            da = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            db = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return (da, db)

    return record(out, (a, b), vjp)


def softmax(a, axis: int = -1, scale: float = 1.0) -> Tensor:
    """Numerically stabilized softmax of `scale * a` along `axis`."""
    a = _as_tensor(a)
    if not -a.data.ndim <= axis < a.data.ndim:
        raise TensorError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data if scale == 1.0 else scale * a.data
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def vjp(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        dz = y * (g - dot)
        return (dz if scale == 1.0 else scale * dz,)

    return record(out, (a,), vjp)


def head_mix_norm(scores, mix, guard: float = 1e-8) -> Tensor:
    """Blend per-head attention maps through `mix`, then renormalize rows.

    `scores` is (B x) h x S x S with rows summing to one; output head i is
    sum_j mix[j, i] * scores_j with each row divided by its sum. Rows whose
    mixed sum falls under `guard` in magnitude keep their pre-mix values.
    Fused into one node: the maps are large and the op is memory-bound.
    """
    scores, mix = _as_tensor(scores), _as_tensor(mix)
    h = mix.shape[0]
    if mix.shape != (h, h) or scores.shape[-3] != h:
        raise TensorError("mix must be h x h matching the head axis")
    a = scores.data
    mixed = np.einsum("...jab,ji->...iab", a, mix.data, optimize=True)
    rs = mixed.sum(axis=-1, keepdims=True)
    degenerate = np.abs(rs) < guard
    safe = np.where(degenerate, 1.0, rs)
    y = mixed / safe
    if degenerate.any():
        y = np.where(degenerate, a, y)
    out = Tensor(y)

    def vjp(g):
        # y = mixed / rs (rowwise) => dmixed = (g - y * sum(g*y... )) ...
        row_dot = (g * y).sum(axis=-1, keepdims=True)
        dmixed = (g - row_dot) / safe
        if degenerate.any():
            dmixed = np.where(degenerate, 0.0, dmixed)
        da = dm = None
        if scores.requires_grad:
            da = np.einsum("...iab,ji->...jab", dmixed, mix.data,
                           optimize=True)
            if degenerate.any():
                da = da + np.where(degenerate, g, 0.0)
        if mix.requires_grad:
            dm = np.einsum("...jab,...iab->ji", a, dmixed, optimize=True)
        return (da, dm)

    return record(out, (scores, mix), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize each last-axis vector to zero mean/unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise TensorError("gamma/beta must match the last-axis extent")
    centered = sub(x, tmean(x, axis=-1, keepdims=True))
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv_std = power(add(var, eps), -0.5)
    return add(mul(mul(centered, inv_std), gamma), beta)


# ---------------------------------------------------------------------------
# shape suite

def permute(a, axes: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.data.ndim)):
        raise TensorError(f"invalid permutation {axes} for rank {a.data.ndim}")
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)))
    return record(out, (a,), lambda g: (g.transpose(inverse),))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(a.data.reshape(tuple(shape)))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim == 2:
        return permute(a, (1, 0))
    if a.data.ndim == 3:  # batched: swap trailing axes
        return permute(a, (0, 2, 1))
    raise TensorError("transpose2d expects rank 2 or 3")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise TensorError("concat of empty list")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, range(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors)))

    return record(out, tensors, vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along `axis`."""
    a = _as_tensor(a)
    if start < 0 or start + length > a.shape[axis]:
        raise TensorError("narrow out of range")
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = Tensor(a.data[index].copy())

    def vjp(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# convolution / pooling

def _conv_geometry(h: int, w: int, k: int, stride: int, padding: str):
    if padding == "same":
        out_h = -(-h // stride)
        out_w = -(-w // stride)
        pad_h = max((out_h - 1) * stride + k - h, 0)
        pad_w = max((out_w - 1) * stride + k - w, 0)
    elif padding == "valid":
        out_h = (h - k) // stride + 1
        out_w = (w - k) // stride + 1
        pad_h = pad_w = 0
    else:
        raise TensorError(f"unknown padding {padding!r}")
    return out_h, out_w, pad_h, pad_w


def conv2d(x, kernels, stride: int = 1, padding: str = "same") -> Tensor:
    """Cross-correlation; x is HxWxC or BxHxWxC, kernels kxkxCinxCout."""
    x, kernels = _as_tensor(x), _as_tensor(kernels)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise TensorError("conv2d input must be rank 3 or 4")
    if kernels.data.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise TensorError("kernels must be k x k x cin x cout")
    k = kernels.shape[0]
    if k % 2 == 0:
        raise TensorError("kernel extent must be odd")
    xb = x.data if batched else x.data[None]
    n, h, w, cin = xb.shape
    if cin != kernels.shape[2]:
        raise TensorError(
            f"channel mismatch: input {cin}, kernels {kernels.shape[2]}")
    cout = kernels.shape[3]
    out_h, out_w, pad_h, pad_w = _conv_geometry(h, w, k, stride, padding)
    if out_h < 1 or out_w < 1:
        raise TensorError("conv2d output would be empty")
    pt, pl = pad_h // 2, pad_w // 2
    xp = np.pad(xb, ((0, 0), (pt, pad_h - pt), (pl, pad_w - pl), (0, 0)))

    # im2col: windows (n, out_h, out_w, k, k, cin) -> matmul with kernels
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    windows = windows[:, ::stride, ::stride]          # n,oh,ow,cin,k,k
    cols = windows.transpose(0, 1, 2, 4, 5, 3)        # n,oh,ow,k,k,cin
    cols2 = cols.reshape(n * out_h * out_w, k * k * cin)
    kmat = kernels.data.reshape(k * k * cin, cout)
    y = (cols2 @ kmat).reshape(n, out_h, out_w, cout)
    out = Tensor(y if batched else y[0])

    def vjp(g):
        gb = g if batched else g[None]
        g2 = gb.reshape(n * out_h * out_w, cout)
        dk = dx = None
        if kernels.requires_grad:
            dk = (cols2.T @ g2).reshape(kernels.shape)
        if x.requires_grad:
            dcols = (g2 @ kmat.T).reshape(n, out_h, out_w, k, k, cin)
            dxp = np.zeros_like(xp)
            for ki in range(k):
                for kj in range(k):
                    dxp[:, ki:ki + out_h * stride:stride,
                        kj:kj + out_w * stride:stride] += dcols[:, :, :, ki, kj]
            dxf = dxp[:, pt:pt + h, pl:pl + w]
            dx = dxf if batched else dxf[0]
        return (dx, dk)

    return record(out, (x, kernels), vjp)


def pool_adaptive_avg(x, out_h: int, out_w: int) -> Tensor:
    """Adaptive average pooling over the two spatial axes (HxWxC or BxHxWxC)."""
    x = _as_tensor(x)
    batched = x.data.ndim == 4
    if x.data.ndim not in (3, 4):
        raise TensorError("pool input must be rank 3 or 4")
    xb = x.data if batched else x.data[None]
    n, h, w, c = xb.shape
    if out_h > h or out_w > w:
        raise TensorError("adaptive pool cannot upsample")
    hb = [int(i * h / out_h) for i in range(out_h + 1)]
    wb = [int(j * w / out_w) for j in range(out_w + 1)]
    y = np.empty((n, out_h, out_w, c), dtype=xb.dtype)
    for i in range(out_h):
        for j in range(out_w):
            y[:, i, j] = xb[:, hb[i]:hb[i + 1], wb[j]:wb[j + 1]].mean(axis=(1, 2))
    out = Tensor(y if batched else y[0])

    def vjp(g):
        gb = g if batched else g[None]
        dx = np.zeros_like(xb)
        for i in range(out_h):
            for j in range(out_w):
                area = (hb[i + 1] - hb[i]) * (wb[j + 1] - wb[j])
                dx[:, hb[i]:hb[i + 1], wb[j]:wb[j + 1]] += \
                    gb[:, i:i + 1, j:j + 1] / area
        return (dx if batched else dx[0],)

    return record(out, (x,), vjp)
