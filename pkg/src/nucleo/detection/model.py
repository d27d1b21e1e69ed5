"""The assembled detector: backbone, FPN, RPN, ROI heads, losses and inference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import softmax

from nucleo import geometry
from nucleo.autodiff.nn import Module
from nucleo.autodiff.tensor import Tensor
from nucleo.detection.backbone import STRIDES, FPN, MicroBackbone
from nucleo.detection.heads import BoxHead, MaskHead, heads_forward
from nucleo.detection.loss import LossBreakdown, multitask_loss
from nucleo.detection.roi_align import pyramid_roi_align
from nucleo.detection.rpn import Proposals, RPNHead, assign_rpn_targets, concat_levels, generate_proposals
from nucleo.detection.targets import DetectionTargets, sample_detection_targets
from nucleo.maskops import paste_mask


@dataclass(frozen=True)
class DetectorConfig:
    backbone_widths: tuple[int, ...] = (16, 32, 64, 128)
    stem_width: int = 16
    convs_per_stage: int = 1
    fpn_channels: int = 32
    head_hidden: int = 128
    pool_size: int = 7
    mask_pool_size: int = 14
    # mean-subtracted pixels span about +-128; bring them to unit scale
    input_scale: float = 1.0 / 128.0
    anchor: geometry.AnchorSpec = field(default_factory=geometry.AnchorSpec)
    # RPN training
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_pos_fraction: float = 0.5
    # proposals
    pre_nms_top_k: int = 2000
    rpn_nms_iou: float = 0.7
    post_nms_top_k: int = 512
    post_nms_top_k_infer: int = 512
    # roi sampling
    roi_batch: int = 128
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    # inference
    min_objectness: float = 1e-6
    score_threshold: float = 0.7
    det_nms_iou: float = 0.3
    max_detections: int = 400
    mask_threshold: float = 0.5

    @property
    def mask_size(self) -> int:
        return 2 * self.mask_pool_size


@dataclass(frozen=True)
class TrainingTargets:
    rpn_labels: np.ndarray
    rpn_deltas: np.ndarray
    det: DetectionTargets


@dataclass(frozen=True)
class Detection:
    box: np.ndarray
    score: float
    mask: np.ndarray


class MaskRCNN(Module):
    def __init__(self, config: DetectorConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or DetectorConfig()
        cfg = self.config
        if tuple(cfg.anchor.strides) != STRIDES:
            raise ValueError(f"anchor strides must be {STRIDES} to match the pyramid")
        per_cell = set(cfg.anchor.anchors_per_cell)
        if len(per_cell) != 1:
            raise ValueError("every level needs the same number of anchors per cell")
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.backbone = MicroBackbone(cfg.backbone_widths, cfg.stem_width, cfg.convs_per_stage, rng, dtype)
        self.fpn = FPN(self.backbone.out_channels, cfg.fpn_channels, rng, dtype)
        self.rpn = RPNHead(cfg.fpn_channels, per_cell.pop(), rng, dtype)
        self.box_head = BoxHead(cfg.fpn_channels, cfg.pool_size, cfg.head_hidden, rng, dtype)
        self.mask_head = MaskHead(cfg.fpn_channels, rng=rng, dtype=dtype)
        self._anchor_cache: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]] = {}
        for name, p in self.named_parameters():
            p.name = name

    def astype(self, dtype):
        super().astype(dtype)
        self.dtype = np.dtype(dtype)
        return self

    def anchors(self, h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
        if (h, w) not in self._anchor_cache:
            self._anchor_cache[(h, w)] = geometry.generate_anchors(self.config.anchor, h, w)
        return self._anchor_cache[(h, w)]

    def pyramid(self, image) -> list[Tensor]:
        x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        x = x * self.dtype.type(self.config.input_scale)
        return self.fpn(self.backbone(Tensor(x)))

    def propose(self, logits: np.ndarray, deltas: np.ndarray, h: int, w: int, training: bool) -> Proposals:
        cfg = self.config
        anchors, levels = self.anchors(h, w)
        return generate_proposals(
            logits,
            deltas,
            anchors,
            levels,
            (h, w),
            cfg.pre_nms_top_k,
            cfg.rpn_nms_iou,
            cfg.post_nms_top_k if training else cfg.post_nms_top_k_infer,
            min_objectness=0.0 if training else cfg.min_objectness,
        )

    def make_targets(self, rpn_logits, rpn_deltas, h, w, gt_boxes, gt_masks, rng) -> TrainingTargets:
        cfg = self.config
        anchors, _ = self.anchors(h, w)
        labels, deltas = assign_rpn_targets(
            anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou, cfg.rpn_batch, cfg.rpn_pos_fraction, rng
        )
        props = self.propose(rpn_logits, rpn_deltas, h, w, training=True)
        det = sample_detection_targets(
            props.boxes,
            gt_boxes,
            gt_masks,
            rng,
            cfg.roi_batch,
            cfg.roi_fg_fraction,
            cfg.roi_fg_iou,
            cfg.mask_size,
        )
        return TrainingTargets(labels, deltas, det)

    def training_losses(
        self,
        image,
        gt_boxes,
        gt_masks: Sequence[np.ndarray],
        rng: np.random.Generator,
        targets: TrainingTargets | None = None,
    ) -> tuple[Tensor, LossBreakdown, TrainingTargets]:
        """Forward pass and multitask loss for one image ``(3, H, W)``.

        Targets are sampled from the current proposals unless given; passing
        the returned targets back in makes the loss a fixed function of the
        parameters.
        """
        cfg = self.config
        h, w = np.shape(image)[-2:]
        pyramid = self.pyramid(image)
        rpn_logits, rpn_deltas = concat_levels(self.rpn(pyramid))
        if targets is None:
            targets = self.make_targets(rpn_logits.data, rpn_deltas.data, h, w, gt_boxes, gt_masks, rng)
        det = targets.det
        pooled = pyramid_roi_align(pyramid, det.rois, STRIDES, cfg.pool_size)
        pooled_mask = pyramid_roi_align(pyramid, det.fg_rois, STRIDES, cfg.mask_pool_size)
        cls, box, mask = heads_forward(self.box_head, self.mask_head, pooled, pooled_mask)
        total, breakdown = multitask_loss(
            rpn_logits, rpn_deltas, cls, box, mask, targets.rpn_labels, targets.rpn_deltas, det
        )
        return total, breakdown, targets

    def detect(
        self,
        image,
        score_threshold: float | None = None,
        nms_iou: float | None = None,
        max_detections: int | None = None,
        output_scale: float = 1.0,
        output_hw: tuple[int, int] | None = None,
    ) -> list[Detection]:
        """Run inference on one preprocessed image ``(3, H, W)``.

        Boxes are divided by ``output_scale`` and masks are pasted into an
        ``output_hw`` canvas, which lets callers map results back to the
        original (pre-upsampling, unpadded) image.
        """
        cfg = self.config
        score_threshold = cfg.score_threshold if score_threshold is None else score_threshold
        nms_iou = cfg.det_nms_iou if nms_iou is None else nms_iou
        max_detections = cfg.max_detections if max_detections is None else max_detections
        h, w = np.shape(image)[-2:]
        if output_hw is None:
            output_hw = (int(round(h / output_scale)), int(round(w / output_scale)))

        pyramid = self.pyramid(image)
        rpn_logits, rpn_deltas = concat_levels(self.rpn(pyramid))
        props = self.propose(rpn_logits.data, rpn_deltas.data, h, w, training=False)
        if len(props) == 0:
            return []
        pooled = pyramid_roi_align(pyramid, props.boxes, STRIDES, cfg.pool_size)
        cls, box = self.box_head(pooled)
        scores = softmax(cls.data.astype(np.float64), axis=1)[:, 1]
        boxes = geometry.clip_box(geometry.decode_delta(props.boxes, box.data), h, w)
        ok = (scores >= score_threshold) & (boxes[:, 2] - boxes[:, 0] >= 1) & (boxes[:, 3] - boxes[:, 1] >= 1)
        boxes, scores = boxes[ok], scores[ok]
        keep = geometry.nms(boxes, scores, nms_iou)[:max_detections]
        if len(keep) == 0:
            return []
        boxes, scores = boxes[keep], scores[keep]
        mask_logits = self.mask_head(pyramid_roi_align(pyramid, boxes, STRIDES, cfg.mask_pool_size))
        out = []
        for b, s, logit in zip(boxes, scores, mask_logits.data[:, 0]):
            ob = b / output_scale
            mask = paste_mask(logit, ob, output_hw[0], output_hw[1], cfg.mask_threshold)
            out.append(Detection(ob, float(s), mask))
        return out
