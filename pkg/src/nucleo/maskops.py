"""Binary instance masks and their run-length wire format.

Masks are ``(H, W)`` boolean arrays. Run-length encoding follows the Data
Science Bowl 2018 convention: pixels are numbered column-major (top to bottom,
then left to right) starting at 1, and a mask is a list of maximal
``(start, length)`` runs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

from nucleo.interp import interp_weights

MASK_SIZE = 28
SUBMISSION_HEADER = "ImageId,EncodedPixels"


@dataclass(frozen=True)
class RleMask:
    height: int
    width: int
    runs: tuple[tuple[int, int], ...]

    def __str__(self):
        return " ".join(f"{s} {n}" for s, n in self.runs)

    @classmethod
    def from_string(cls, text: str, height: int, width: int) -> "RleMask":
        values = [int(v) for v in text.split()]
        if len(values) % 2:
            raise ValueError("run list has an odd number of integers")
        return cls(height, width, tuple(zip(values[0::2], values[1::2])))


def rle_encode(mask: np.ndarray) -> RleMask:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    flat = (m.T.reshape(-1) != 0).astype(np.int8)
    pixels = np.concatenate([[0], flat, [0]])
    edges = np.flatnonzero(pixels[1:] != pixels[:-1]) + 1
    starts, ends = edges[0::2], edges[1::2]
    runs = tuple((int(s), int(e - s)) for s, e in zip(starts, ends))
    return RleMask(m.shape[0], m.shape[1], runs)


def rle_decode(rle: RleMask) -> np.ndarray:
    """Decode runs into a boolean mask.

    Raises:
        ValueError: if runs are out of range, unsorted, overlapping or adjacent.
    """
    n = rle.height * rle.width
    flat = np.zeros(n, dtype=bool)
    prev_end = 0  # one past the last pixel of the previous run, 1-indexed
    for start, length in rle.runs:
        if start < 1 or length < 1 or start + length - 1 > n:
            raise ValueError(f"run ({start}, {length}) out of range for {rle.height}x{rle.width}")
        if start <= prev_end:
            raise ValueError(f"run ({start}, {length}) overlaps or touches the previous run")
        flat[start - 1 : start - 1 + length] = True
        prev_end = start + length
    return flat.reshape(rle.width, rle.height).T


def format_submission_line(image_id: str, rle: RleMask) -> str:
    return f"{image_id},{rle}"


def parse_submission_line(line: str) -> tuple[str, list[int]]:
    image_id, _, encoded = line.rstrip("\r\n").partition(",")
    return image_id, [int(v) for v in encoded.split()]


def read_submission(path: str | os.PathLike) -> dict[str, list[str]]:
    """Read a submission file into ``image_id -> [encoded run strings]``.

    The header line is optional. Run strings are kept verbatim so callers can
    decode them once image sizes are known.
    """
    out: dict[str, list[str]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line or line == SUBMISSION_HEADER:
                continue
            image_id, _, encoded = line.partition(",")
            runs = out.setdefault(image_id, [])
            if encoded.strip():
                runs.append(encoded)
    return out


def write_submission(path: str | os.PathLike, rows: Iterable[tuple[str, RleMask | None]]) -> None:
    """Write ``(image_id, rle)`` rows; ``None`` marks an image with no instances."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SUBMISSION_HEADER + "\n")
        for image_id, rle in rows:
            fh.write(f"{image_id},{'' if rle is None else rle}\n")


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def mask_iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise IoU between two lists of same-sized masks, shape ``(P, G)``."""
    if not len(preds) or not len(gts):
        return np.zeros((len(preds), len(gts)))
    p = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in preds]).astype(np.float64)
    g = np.stack([np.asarray(m, dtype=bool).reshape(-1) for m in gts]).astype(np.float64)
    if p.shape[1] != g.shape[1]:
        raise ValueError("prediction and ground-truth masks differ in size")
    inter = p @ g.T
    union = p.sum(1)[:, None] + g.sum(1)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def merge_masks(masks: Sequence[np.ndarray], shape: tuple[int, int] | None = None) -> np.ndarray:
    """Merge per-instance masks into one label image.

    Mask ``k`` (0-based) becomes label ``k + 1``. A pixel covered by several
    masks goes to the one with the smallest area, ties to the lower index.
    Labels of masks that lose every pixel are compacted away so the label set
    stays contiguous.
    """
    if not len(masks):
        if shape is None:
            raise ValueError("shape is required for an empty mask list")
        return np.zeros(shape, dtype=np.int32)
    shape = masks[0].shape
    if any(m.shape != shape for m in masks):
        raise ValueError("all masks must share one shape")
    areas = np.array([np.count_nonzero(m) for m in masks])
    labels = np.zeros(shape, dtype=np.int32)
    # paint largest first so smaller masks win overlaps; among equal areas the
    # lower index is painted last
    for k in sorted(range(len(masks)), key=lambda i: (-areas[i], -i)):
        labels[np.asarray(masks[k], dtype=bool)] = k + 1
    present = np.unique(labels)
    present = present[present > 0]
    if len(present) != labels.max():
        lut = np.zeros(len(masks) + 1, dtype=np.int32)
        lut[present] = np.arange(1, len(present) + 1)
        labels = lut[labels]
    return labels


def _roi_axis_coords(lo: float, hi: float, m: int) -> np.ndarray:
    # sample centers of m equal bins over [lo, hi), in pixel index space
    return lo + (np.arange(m) + 0.5) * (hi - lo) / m - 0.5


def extract_mask_target(instance: np.ndarray, roi, m: int = MASK_SIZE) -> np.ndarray:
    """Resample the part of ``instance`` under ``roi`` onto an ``m x m`` grid."""
    x1, y1, x2, y2 = (float(v) for v in roi)
    if x2 <= x1 or y2 <= y1:
        raise ValueError(f"roi {roi} has zero area")
    if m < 1:
        raise ValueError("mask side must be at least 1")
    h, w = instance.shape
    wy = interp_weights(_roi_axis_coords(y1, y2, m), h, "clamp")
    wx = interp_weights(_roi_axis_coords(x1, x2, m), w, "clamp")
    return wy @ np.asarray(instance, dtype=np.float64) @ wx.T


def paste_mask(
    logits: np.ndarray, roi, image_h: int, image_w: int, threshold: float = 0.5
) -> np.ndarray:
    """Turn an ``m x m`` logit grid predicted for ``roi`` into an image mask.

    Pixels whose centers fall inside the roi get the bilinearly interpolated
    probability at their center; those at or above ``threshold`` are set.
    """
    logits = np.asarray(logits, dtype=np.float64)
    mh, mw = logits.shape
    out = np.zeros((image_h, image_w), dtype=bool)
    x1, y1, x2, y2 = (float(v) for v in roi)
    if x2 <= x1 or y2 <= y1:
        return out
    c0 = max(int(np.ceil(x1 - 0.5)), 0)
    c1 = min(int(np.ceil(x2 - 0.5)), image_w)
    r0 = max(int(np.ceil(y1 - 0.5)), 0)
    r1 = min(int(np.ceil(y2 - 0.5)), image_h)
    if c1 <= c0 or r1 <= r0:
        return out
    gx = (np.arange(c0, c1) + 0.5 - x1) / (x2 - x1) * mw - 0.5
    gy = (np.arange(r0, r1) + 0.5 - y1) / (y2 - y1) * mh - 0.5
    prob = interp_weights(gy, mh) @ expit(logits) @ interp_weights(gx, mw).T
    out[r0:r1, c0:c1] = prob >= threshold
    return out
