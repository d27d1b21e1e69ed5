"""Differentiable array operations.

Each op computes its forward value with numpy and, when a tape is active and
an input requires a gradient, records a closure mapping the output gradient to
input gradients.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nucleo.autodiff.tensor import Tensor, record
from nucleo.interp import resize_weights


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return record(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", x.data * mask, (x,), lambda g: (g * mask,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return record("concat", np.concatenate([t.data for t in xs], axis=axis), xs, backward)


def take(x: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (out,)

    return record("take", np.take(x.data, index, axis=axis), (x,), backward)


def weighted_sum(x: Tensor, weights) -> Tensor:
    """``sum(x * weights)`` with constant weights; reduces any op to a scalar."""
    w = np.asarray(weights, dtype=x.dtype)
    return record("weighted_sum", np.sum(x.data * w), (x,), lambda g: (g * w,))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(R, D)``."""
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("linear", out, inputs, backward)


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ValueError(
            f"input size {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not tile to an integral output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation over ``(N, C, H, W)`` with weights ``(F, C, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"input has {c} channels but weight expects {cw}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = weight.data.reshape(f, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gmat.sum(axis=0) if bias is not None else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv2d", out, inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Transposed convolution with kernel size equal to stride (non-overlapping).

    ``weight`` has shape ``(C, F, k, k)``; output is ``(N, F, k*H, k*W)``.
    """
    n, c, h, w = x.shape
    cw, f, k, k2 = weight.shape
    if c != cw or k != k2:
        raise ValueError(f"incompatible shapes {x.shape} and {weight.shape}")
    t = np.tensordot(x.data, weight.data, axes=([1], [0]))  # n h w f a b
    out = t.transpose(0, 3, 1, 4, 2, 5).reshape(n, f, h * k, w * k)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        g6 = g.reshape(n, f, h, k, w, k)
        gx = np.tensordot(g6, weight.data, axes=([1, 3, 5], [1, 2, 3])) if x.requires_grad else None
        gw = np.tensordot(x.data, g6, axes=([0, 2, 3], [0, 2, 4])) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx.transpose(0, 3, 1, 2) if gx is not None else None), gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("conv_transpose2d", np.ascontiguousarray(out), inputs, backward)


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route the gradient to the first max."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4
    )
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        onehot = (np.arange(4) == arg[..., None]) * g[..., None]
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (gx.reshape(n, c, h, w),)

    return record("max_pool2d", out, (x,), backward)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize the last two axes with half-pixel centers (``align_corners=False``)."""
    if out_h < 1 or out_w < 1:
        raise ValueError("output dims must be positive")
    wy = resize_weights(x.shape[-2], out_h, x.dtype)
    wx = resize_weights(x.shape[-1], out_w, x.dtype)
    out = np.matmul(np.matmul(wy, x.data), wx.T)
    return record(
        "bilinear_resize", out, (x,), lambda g: (np.matmul(np.matmul(wy.T, g), wx),)
    )
