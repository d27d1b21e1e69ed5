"""Region proposal network: head, anchor labelling and proposal generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import expit

from nucleo import geometry
from nucleo.autodiff import ops
from nucleo.autodiff.nn import Conv2d, Module
from nucleo.autodiff.tensor import Tensor


class RPNHead(Module):
    """Shared 3x3 conv with sibling 1x1 objectness and box-delta convs.

    Per level the outputs are flattened as (row, col, anchor), which matches
    :func:`nucleo.geometry.generate_anchors`.
    """

    def __init__(self, channels, anchors_per_cell, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.conv = Conv2d(channels, channels, 3, rng=rng, dtype=dtype)
        self.objectness = Conv2d(channels, anchors_per_cell, 1, rng=rng, dtype=dtype)
        self.deltas = Conv2d(channels, 4 * anchors_per_cell, 1, rng=rng, dtype=dtype)
        self.anchors_per_cell = anchors_per_cell

    def level(self, p: Tensor) -> tuple[Tensor, Tensor]:
        n, _, h, w = p.shape
        a = self.anchors_per_cell
        t = ops.relu(self.conv(p))
        logits = ops.reshape(ops.transpose(self.objectness(t), (0, 2, 3, 1)), (n * h * w * a,))
        d = ops.reshape(self.deltas(t), (n, a, 4, h, w))
        d = ops.reshape(ops.transpose(d, (0, 3, 4, 1, 2)), (n * h * w * a, 4))
        return logits, d

    def __call__(self, pyramid: Sequence[Tensor]) -> list[tuple[Tensor, Tensor]]:
        return [self.level(p) for p in pyramid]


def concat_levels(outputs: Sequence[tuple[Tensor, Tensor]]) -> tuple[Tensor, Tensor]:
    logits = [o[0] for o in outputs]
    deltas = [o[1] for o in outputs]
    if len(outputs) == 1:
        return logits[0], deltas[0]
    return ops.concat(logits, 0), ops.concat(deltas, 0)


def label_anchors(anchors, gt_boxes, pos_iou=0.7, neg_iou=0.3) -> tuple[np.ndarray, np.ndarray]:
    """Unsampled anchor labels (1 positive, 0 negative, -1 ignore) and targets.

    An anchor is positive when its best IoU reaches ``pos_iou`` or when it
    attains the (nonzero) maximum IoU of some ground-truth box; negative when
    its best IoU is below ``neg_iou``. Targets are encoded against each
    positive anchor's best-overlapping box; other rows are zero.
    """
    anchors = geometry.as_boxes(anchors)
    gt = geometry.as_boxes(gt_boxes)
    labels = np.full(len(anchors), -1, dtype=np.int64)
    deltas = np.zeros((len(anchors), 4))
    if len(gt) == 0:
        labels[:] = 0
        return labels, deltas
    iou = geometry.box_iou(anchors, gt)
    best_gt = iou.argmax(axis=1)
    best = iou[np.arange(len(anchors)), best_gt]
    labels[best < neg_iou] = 0
    labels[best >= pos_iou] = 1
    gt_max = iou.max(axis=0)
    is_argmax = np.any((iou == gt_max[None, :]) & (gt_max[None, :] > 0), axis=1)
    labels[is_argmax] = 1
    pos = labels == 1
    if pos.any():
        deltas[pos] = geometry.encode_delta(anchors[pos], gt[best_gt[pos]])
    return labels, deltas


def sample_labels(labels: np.ndarray, batch: int, pos_fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Subsample to at most ``batch`` labelled entries; the rest become -1."""
    out = labels.copy()
    pos = np.flatnonzero(out == 1)
    max_pos = int(batch * pos_fraction)
    if len(pos) > max_pos:
        out[rng.choice(pos, len(pos) - max_pos, replace=False)] = -1
    n_pos = int(np.sum(out == 1))
    neg = np.flatnonzero(out == 0)
    max_neg = batch - n_pos
    if len(neg) > max_neg:
        out[rng.choice(neg, len(neg) - max_neg, replace=False)] = -1
    return out


def assign_rpn_targets(
    anchors,
    gt_boxes,
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
    batch: int | None = 256,
    pos_fraction: float = 0.5,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Label anchors for RPN training and sample a minibatch of them.

    Returns:
        ``(labels, deltas)``; labels in ``{1, 0, -1}``. ``batch=None`` skips
        the sampling step.
    """
    labels, deltas = label_anchors(anchors, gt_boxes, pos_iou, neg_iou)
    if batch is not None:
        labels = sample_labels(labels, batch, pos_fraction, rng or np.random.default_rng(0))
        deltas[labels != 1] = 0.0
    return labels, deltas


@dataclass(frozen=True)
class Proposals:
    boxes: np.ndarray  # (K, 4), clipped to the image
    objectness: np.ndarray  # (K,), in (0, 1)
    levels: np.ndarray  # (K,), pyramid index of the source anchor

    def __len__(self):
        return len(self.boxes)


def generate_proposals(
    logits,
    deltas,
    anchors,
    anchor_levels,
    image_hw: tuple[int, int],
    pre_nms_top_k: int = 2000,
    nms_iou: float = 0.7,
    post_nms_top_k: int = 512,
    min_size: float = 1.0,
    min_objectness: float = 0.0,
) -> Proposals:
    """Top-k by objectness, decode, clip, drop tiny boxes, NMS, top-k."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-logits, kind="stable")[:pre_nms_top_k]
    score = expit(logits[order])
    keep = score >= min_objectness if min_objectness > 0 else np.ones(len(order), bool)
    order, score = order[keep], score[keep]
    boxes = geometry.clip_box(
        geometry.decode_delta(geometry.as_boxes(anchors)[order], deltas[order]), *image_hw
    )
    big = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
    order, score, boxes = order[big], score[big], boxes[big]
    kept = geometry.nms(boxes, score, nms_iou)[:post_nms_top_k]
    return Proposals(boxes[kept], score[kept], np.asarray(anchor_levels)[order[kept]])
