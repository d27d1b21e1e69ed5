from nucleo.detection.backbone import FPN, STRIDES, MicroBackbone
from nucleo.detection.heads import BoxHead, MaskHead, heads_forward
from nucleo.detection.loss import LossBreakdown, multitask_loss
from nucleo.detection.model import Detection, DetectorConfig, MaskRCNN, TrainingTargets
from nucleo.detection.roi_align import assign_roi_level, pyramid_roi_align, roi_align
from nucleo.detection.rpn import (
    Proposals,
    RPNHead,
    assign_rpn_targets,
    concat_levels,
    generate_proposals,
    label_anchors,
)
from nucleo.detection.targets import DetectionTargets, sample_detection_targets

__all__ = [
    "FPN",
    "STRIDES",
    "BoxHead",
    "Detection",
    "DetectionTargets",
    "DetectorConfig",
    "LossBreakdown",
    "MaskHead",
    "MaskRCNN",
    "MicroBackbone",
    "Proposals",
    "RPNHead",
    "TrainingTargets",
    "assign_roi_level",
    "assign_rpn_targets",
    "concat_levels",
    "generate_proposals",
    "heads_forward",
    "label_anchors",
    "multitask_loss",
    "pyramid_roi_align",
    "roi_align",
    "sample_detection_targets",
]
