from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from nucleo.autodiff import ops
from nucleo.autodiff.losses import sigmoid_bce, smooth_l1, softmax_cross_entropy
from nucleo.autodiff.tensor import Tensor
from nucleo.detection.targets import DetectionTargets


@dataclass(frozen=True)
class LossBreakdown:
    """The three loss terms; ``total`` is always their plain float sum."""

    l_cls: float
    l_bbox: float
    l_mask: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.l_cls + self.l_bbox + self.l_mask)


def rpn_class_logits(logits: Tensor, index) -> Tensor:
    """Two-column ``[0, s]`` logits for the selected anchors.

    Softmax over ``[0, s]`` is the logistic function of ``s``, so the single
    objectness score per anchor trains under the same cross-entropy as the
    class head.
    """
    sel = ops.reshape(ops.take(logits, index), (len(index), 1))
    zeros = Tensor(np.zeros((len(index), 1), logits.dtype))
    return ops.concat([zeros, sel], axis=1)


def multitask_loss(
    rpn_logits: Tensor,
    rpn_deltas: Tensor,
    cls_logits: Tensor,
    box_deltas: Tensor,
    mask_logits: Tensor,
    rpn_labels: np.ndarray,
    rpn_delta_targets: np.ndarray,
    det: DetectionTargets,
) -> tuple[Tensor, LossBreakdown]:
    """Sum of classification, box-regression and mask terms.

    ``l_cls`` is RPN objectness plus head classification cross-entropy,
    ``l_bbox`` the smooth-L1 over positive anchors and foreground rois, and
    ``l_mask`` the per-pixel BCE over foreground mask grids. ``mask_logits``
    holds one grid per foreground roi, in ``det.fg_index`` order.
    """
    sampled = np.flatnonzero(rpn_labels >= 0)
    pos = np.flatnonzero(rpn_labels == 1)
    rpn_cls = softmax_cross_entropy(rpn_class_logits(rpn_logits, sampled), rpn_labels[sampled])
    rpn_box = smooth_l1(ops.take(rpn_deltas, pos), rpn_delta_targets[pos])

    head_cls = softmax_cross_entropy(cls_logits, det.labels)
    head_box = smooth_l1(ops.take(box_deltas, det.fg_index), det.box_deltas)
    f = len(det.fg_index)
    m = det.mask_targets.shape[-1]
    mask = sigmoid_bce(ops.reshape(mask_logits, (f, m, m)), det.mask_targets)

    l_cls = ops.add(rpn_cls, head_cls)
    l_bbox = ops.add(rpn_box, head_box)
    total = ops.add(ops.add(l_cls, l_bbox), mask)
    breakdown = LossBreakdown(float(l_cls.data), float(l_bbox.data), float(mask.data))
    return total, breakdown
