"""ROI-Align over one feature map or a routed pyramid.

A roi is mapped to feature coordinates by plain division by the stride; no
coordinate is rounded. Each output bin averages a regular ``S x S`` grid of
bilinear samples taken at interior points of the bin. Feature cell ``u`` has
its center at continuous coordinate ``u + 0.5``; samples falling outside the
map take the value of the nearest border cell, so a constant map pools to
that constant for any roi.

Because the sample set of every roi is a product grid, pooling a ``(C, h, w)``
map reduces to ``Wy @ F @ Wx.T`` with per-roi weight matrices ``Wy (p, h)``
and ``Wx (p, w)`` that already include the bin averaging.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from nucleo.autodiff.ops import concat, take
from nucleo.autodiff.tensor import Tensor, record
from nucleo.interp import interp_weights

CANONICAL_ROI = 56.0
LEVEL_MIN, LEVEL_MAX = 2, 5


def _axis_weights(lo, hi, stride, out_size, sampling, size, dtype):
    lo_f = np.asarray(lo, dtype=np.float64) / stride
    bin_size = (np.asarray(hi, dtype=np.float64) / stride - lo_f) / out_size
    offsets = np.arange(out_size)[:, None] + (np.arange(sampling)[None, :] + 0.5) / sampling
    pos = lo_f[:, None, None] + offsets[None] * bin_size[:, None, None]
    return interp_weights(pos - 0.5, size, "clamp").mean(axis=2).astype(dtype)


def roi_align_weights(rois, stride: float, out_size: int, sampling: int, h: int, w: int, dtype=np.float64):
    """Per-roi ``(Wy, Wx)`` of shapes ``(R, p, h)`` and ``(R, p, w)``."""
    r = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    wy = _axis_weights(r[:, 1], r[:, 3], stride, out_size, sampling, h, dtype)
    wx = _axis_weights(r[:, 0], r[:, 2], stride, out_size, sampling, w, dtype)
    return wy, wx


def roi_align(
    feature: Tensor,
    rois,
    stride: float,
    out_size: int = 7,
    sampling: int = 2,
    batch_index=None,
) -> Tensor:
    """Pool ``rois`` (image coordinates) from ``feature`` of shape ``(N, C, h, w)``.

    Returns:
        Tensor of shape ``(R, C, out_size, out_size)``.
    """
    n, c, h, w = feature.shape
    r = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if np.any(r[:, 2] <= r[:, 0]) or np.any(r[:, 3] <= r[:, 1]):
        raise ValueError("roi_align needs rois with positive area")
    bidx = np.zeros(len(r), dtype=np.int64) if batch_index is None else np.asarray(batch_index)
    wy, wx = roi_align_weights(r, stride, out_size, sampling, h, w, feature.dtype)
    out = np.empty((len(r), c, out_size, out_size), dtype=feature.dtype)
    for b in np.unique(bidx):
        sel = bidx == b
        out[sel] = np.matmul(np.matmul(wy[sel][:, None], feature.data[b][None]), wx[sel][:, None].transpose(0, 1, 3, 2))

    def backward(g):
        grad = np.zeros_like(feature.data)
        for b in np.unique(bidx):
            sel = bidx == b
            t = np.matmul(wy[sel][:, None].transpose(0, 1, 3, 2), g[sel])  # R C h p
            grad[b] += np.matmul(t, wx[sel][:, None]).sum(axis=0)
        return (grad,)

    return record("roi_align", out, (feature,), backward)


def assign_roi_level(rois, k0: int = LEVEL_MIN, canonical: float = CANONICAL_ROI) -> np.ndarray:
    """Pyramid level in ``{2..5}`` for each roi, from the square root of its area."""
    r = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    area = (r[:, 2] - r[:, 0]) * (r[:, 3] - r[:, 1])
    if np.any(area <= 0):
        raise ValueError("level routing needs rois with positive area")
    k = np.floor(k0 + np.log2(np.sqrt(area) / canonical))
    return np.clip(k, LEVEL_MIN, LEVEL_MAX).astype(np.int64)


def pyramid_roi_align(
    pyramid: Sequence[Tensor],
    rois,
    strides: Sequence[int],
    out_size: int,
    sampling: int = 2,
) -> Tensor:
    """ROI-Align each roi on the level chosen by :func:`assign_roi_level`.

    ``pyramid[i]`` must be level ``i + 2``. Output rows follow the input order.
    """
    r = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    levels = assign_roi_level(r) - LEVEL_MIN
    levels = np.minimum(levels, len(pyramid) - 1)
    pieces, order = [], []
    for lvl in range(len(pyramid)):
        idx = np.flatnonzero(levels == lvl)
        if idx.size:
            pieces.append(roi_align(pyramid[lvl], r[idx], strides[lvl], out_size, sampling))
            order.append(idx)
    if not pieces:
        c = pyramid[0].shape[1]
        return Tensor(np.zeros((0, c, out_size, out_size), dtype=pyramid[0].dtype))
    pooled = pieces[0] if len(pieces) == 1 else concat(pieces, axis=0)
    perm = np.concatenate(order)
    if np.array_equal(perm, np.arange(len(perm))):
        return pooled
    return take(pooled, np.argsort(perm), axis=0)
