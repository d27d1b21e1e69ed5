"""Linear interpolation weight matrices.

Bilinear sampling on a product grid of sample points is separable: sampling a
2-D array ``F`` at rows ``ys`` and columns ``xs`` equals ``Wy @ F @ Wx.T`` with
one weight matrix per axis. Resize, ROI-Align and the mask codecs all reduce
to this form, which also makes their backward passes two matrix products.

Coordinates are in index space: integer ``i`` is the center of cell ``i``.
"""

from __future__ import annotations

import numpy as np


def interp_weights(coords, size: int, mode: str = "clamp", dtype=np.float64) -> np.ndarray:
    """Weights that linearly interpolate a length-``size`` axis at ``coords``.

    Args:
        coords: Array of sample positions, any shape ``S``.
        size: Length of the sampled axis.
        mode: ``"clamp"`` replicates the border cells; ``"zero"`` treats cells
            outside ``[0, size)`` as zeros.

    Returns:
        Array of shape ``S + (size,)``; each row holds at most two nonzeros.
    """
    u = np.asarray(coords, dtype=np.float64)
    if mode == "clamp":
        u = np.clip(u, 0.0, size - 1)
    elif mode != "zero":
        raise ValueError(f"unknown interpolation mode {mode!r}")
    i0 = np.floor(u)
    frac = u - i0
    i0 = i0.astype(np.int64)
    idx = np.arange(size)
    w = (1.0 - frac)[..., None] * (idx == i0[..., None]) + frac[..., None] * (
        idx == (i0 + 1)[..., None]
    )
    return w.astype(dtype, copy=False)


def resize_weights(in_size: int, out_size: int, dtype=np.float64) -> np.ndarray:
    """Half-pixel-center resize weights (``align_corners=False``)."""
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    return interp_weights(src, in_size, "clamp", dtype)


def resize2d(a: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resize the trailing two axes of ``a``."""
    wy = resize_weights(a.shape[-2], out_h, a.dtype if a.dtype.kind == "f" else np.float64)
    wx = resize_weights(a.shape[-1], out_w, wy.dtype)
    return np.matmul(np.matmul(wy, a), wx.T)
