"""Per-roi training targets for the class, box and mask heads."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from nucleo import geometry
from nucleo.maskops import extract_mask_target


@dataclass(frozen=True)
class DetectionTargets:
    """Sampled rois with their targets.

    ``labels`` is 1 (nucleus), 0 (background) or -1 (ignore) per roi. Box and
    mask targets exist only for the foreground rois listed in ``fg_index``.
    """

    rois: np.ndarray  # (R, 4)
    labels: np.ndarray  # (R,)
    fg_index: np.ndarray  # (F,)
    box_deltas: np.ndarray  # (F, 4)
    mask_targets: np.ndarray  # (F, m, m), binary

    @property
    def fg_rois(self) -> np.ndarray:
        return self.rois[self.fg_index]


def sample_detection_targets(
    proposals,
    gt_boxes,
    gt_masks: Sequence[np.ndarray],
    rng: np.random.Generator,
    batch: int = 128,
    fg_fraction: float = 0.25,
    fg_iou: float = 0.5,
    mask_size: int = 28,
    include_gt: bool = True,
) -> DetectionTargets:
    """Sample foreground/background rois from proposals (plus the gt boxes).

    Foreground rois overlap some ground-truth box with IoU at least
    ``fg_iou``; the rest are background. Foreground rois come first in the
    output. Mask targets are the matched instance resampled under the roi and
    rounded to {0, 1}.
    """
    props = geometry.as_boxes(proposals)
    gt = geometry.as_boxes(gt_boxes)
    rois = np.concatenate([props, gt]) if include_gt and len(gt) else props
    if len(gt):
        iou = geometry.box_iou(rois, gt)
        best_gt = iou.argmax(axis=1)
        best = iou[np.arange(len(rois)), best_gt]
    else:
        best_gt = np.zeros(len(rois), dtype=np.int64)
        best = np.zeros(len(rois))
    fg = np.flatnonzero(best >= fg_iou)
    bg = np.flatnonzero(best < fg_iou)
    n_fg = min(len(fg), int(round(batch * fg_fraction)))
    fg = rng.choice(fg, n_fg, replace=False) if len(fg) > n_fg else fg
    n_bg = min(len(bg), batch - n_fg)
    bg = rng.choice(bg, n_bg, replace=False) if len(bg) > n_bg else bg
    chosen = np.concatenate([fg, bg]).astype(np.int64)
    out_rois = rois[chosen]
    labels = np.concatenate([np.ones(len(fg), np.int64), np.zeros(len(bg), np.int64)])
    fg_index = np.arange(len(fg))
    if len(fg):
        matched = best_gt[fg]
        deltas = geometry.encode_delta(rois[fg], gt[matched])
        masks = np.stack(
            [np.round(extract_mask_target(gt_masks[g], r, mask_size)) for g, r in zip(matched, rois[fg])]
        )
    else:
        deltas = np.zeros((0, 4))
        masks = np.zeros((0, mask_size, mask_size))
    return DetectionTargets(out_rois, labels, fg_index, deltas, masks)
