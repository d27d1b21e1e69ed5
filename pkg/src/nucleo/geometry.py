"""Axis-aligned box arithmetic.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates with the origin
at the top-left corner and y pointing down. Areas are ``(x2 - x1) * (y2 - y1)``;
there is no "+1" pixel convention, so pixel ``(row, col)`` occupies
``[col, col + 1) x [row, row + 1)``.

Box deltas are ``(dx, dy, dw, dh)``: center offsets normalized by the anchor
size and log size ratios. No per-coordinate standard-deviation scaling is
applied, so :func:`encode_delta` and :func:`decode_delta` are exact inverses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Largest log size ratio accepted at decode time.
DELTA_CLAMP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class AnchorSpec:
    """Anchor layout over pyramid levels.

    Attributes:
        strides: Feature stride in pixels for each level, strictly increasing.
        scales: Anchor side lengths in pixels, one tuple per level.
        aspect_ratios: Anchor height/width ratios shared by all levels.
    """

    strides: tuple[int, ...] = (4, 8, 16, 32)
    scales: tuple[tuple[float, ...], ...] = ((16.0,), (32.0,), (64.0,), (128.0,))
    aspect_ratios: tuple[float, ...] = (0.5, 1.0, 2.0)

    def __post_init__(self):
        if len(self.strides) != len(self.scales):
            raise ValueError("need one scale tuple per stride")
        if any(b <= a for a, b in zip(self.strides, self.strides[1:])):
            raise ValueError(f"strides must be strictly increasing: {self.strides}")
        if any(s <= 0 for level in self.scales for s in level) or any(
            r <= 0 for r in self.aspect_ratios
        ):
            raise ValueError("scales and aspect ratios must be positive")

    @property
    def anchors_per_cell(self) -> tuple[int, ...]:
        return tuple(len(s) * len(self.aspect_ratios) for s in self.scales)


def as_boxes(boxes) -> np.ndarray:
    """Return ``boxes`` as a float64 ``(N, 4)`` array."""
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected (N, 4) boxes, got shape {arr.shape}")
    return arr


def box_area(boxes) -> np.ndarray:
    b = as_boxes(boxes)
    return np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)


def iou_box(a, b) -> float:
    """IoU of two single boxes; 0 when the union has zero area."""
    ax1, ay1, ax2, ay2 = (float(v) for v in a)
    bx1, by1, bx2, by2 = (float(v) for v in b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def box_iou(boxes1, boxes2) -> np.ndarray:
    """Pairwise IoU matrix of shape ``(N, M)``."""
    a = as_boxes(boxes1)
    b = as_boxes(boxes2)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms(boxes, scores, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression.

    Repeatedly keeps the highest-scoring remaining box and discards every
    remaining box whose IoU with it exceeds ``iou_threshold``. Equal scores are
    visited in order of original index.

    Returns:
        Kept indices in descending score order.
    """
    b = as_boxes(boxes)
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(b) != len(s):
        raise ValueError("boxes and scores differ in length")
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold {iou_threshold} outside [0, 1]")
    if len(b) == 0:
        return np.zeros(0, dtype=np.int64)

    order = np.argsort(-s, kind="stable")
    areas = box_area(b)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        lt = np.maximum(b[i, :2], b[rest, :2])
        rb = np.minimum(b[i, 2:], b[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        iou = np.zeros_like(inter)
        np.divide(inter, union, out=iou, where=union > 0)
        order = rest[iou <= iou_threshold]
    return np.asarray(keep, dtype=np.int64)


def encode_delta(anchors, gt) -> np.ndarray:
    """Regression target that maps ``anchors`` onto ``gt`` boxes.

    Accepts single boxes or ``(N, 4)`` arrays and returns the same rank.
    """
    single = np.ndim(anchors) == 1
    a = as_boxes(anchors)
    g = as_boxes(gt)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor boxes must have positive width and height")
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    dx = ((g[:, 0] + 0.5 * gw) - (a[:, 0] + 0.5 * aw)) / aw
    dy = ((g[:, 1] + 0.5 * gh) - (a[:, 1] + 0.5 * ah)) / ah
    out = np.stack([dx, dy, np.log(gw / aw), np.log(gh / ah)], axis=1)
    return out[0] if single else out


def decode_delta(anchors, deltas) -> np.ndarray:
    """Inverse of :func:`encode_delta`; size ratios clamped at ``DELTA_CLAMP``."""
    single = np.ndim(anchors) == 1
    a = as_boxes(anchors)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchor boxes must have positive width and height")
    cx = a[:, 0] + 0.5 * aw + d[:, 0] * aw
    cy = a[:, 1] + 0.5 * ah + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], DELTA_CLAMP))
    h = ah * np.exp(np.minimum(d[:, 3], DELTA_CLAMP))
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return out[0] if single else out


def clip_box(boxes, image_h: float, image_w: float) -> np.ndarray:
    """Clamp coordinates into ``[0, w] x [0, h]``."""
    single = np.ndim(boxes) == 1
    b = as_boxes(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, image_w)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, image_h)
    return b[0] if single else b


def level_grid_sizes(spec: AnchorSpec, image_h: int, image_w: int) -> list[tuple[int, int]]:
    return [(math.ceil(image_h / s), math.ceil(image_w / s)) for s in spec.strides]


def generate_anchors(spec: AnchorSpec, image_h: int, image_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Tile anchors over every pyramid level.

    Ordering is level, then row, then column, then (scale, ratio) with the
    ratio varying fastest. The RPN head flattens its outputs the same way.

    Returns:
        ``(boxes, levels)``: ``(A, 4)`` boxes and the ``(A,)`` pyramid index
        (0 for the finest level) of each anchor.
    """
    all_boxes, all_levels = [], []
    for level, (stride, scales) in enumerate(zip(spec.strides, spec.scales)):
        gh, gw = math.ceil(image_h / stride), math.ceil(image_w / stride)
        shapes = []
        for s in scales:
            for r in spec.aspect_ratios:
                w = s / math.sqrt(r)
                shapes.append((w, w * r))
        half = 0.5 * np.asarray(shapes)  # (K, 2) half width / half height
        cy, cx = np.meshgrid(
            stride * (np.arange(gh) + 0.5), stride * (np.arange(gw) + 0.5), indexing="ij"
        )
        centers = np.stack([cx, cy], axis=-1).reshape(-1, 1, 2)
        boxes = np.concatenate([centers - half, centers + half], axis=-1).reshape(-1, 4)
        all_boxes.append(boxes)
        all_levels.append(np.full(len(boxes), level, dtype=np.int64))
    if not all_boxes:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    return np.concatenate(all_boxes), np.concatenate(all_levels)


def masks_to_boxes(masks) -> np.ndarray:
    """Tight boxes around binary masks; pixel ``(r, c)`` spans ``[c, c+1)``."""
    out = np.zeros((len(masks), 4))
    for i, m in enumerate(masks):
        rows = np.flatnonzero(np.any(m, axis=1))
        cols = np.flatnonzero(np.any(m, axis=0))
        if rows.size:
            out[i] = (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)
    return out
