"""Prediction on raw images and overlay rendering."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy import ndimage

from nucleo.data import Sample, preprocess
from nucleo.detection.model import Detection, MaskRCNN

PALETTE = np.array(
    [
        (230, 25, 75),
        (60, 180, 75),
        (255, 225, 25),
        (0, 130, 200),
        (245, 130, 48),
        (145, 30, 180),
        (70, 240, 240),
        (240, 50, 230),
    ],
    dtype=np.uint8,
)


def predict(model: MaskRCNN, raw: Sample, channel_means, **kwargs) -> list[Detection]:
    """Detect on a raw sample; boxes and masks come back in its own pixels."""
    pre = preprocess(raw, channel_means)
    return model.detect(pre.image, output_scale=pre.scale, output_hw=pre.orig_hw, **kwargs)


def predict_samples(model: MaskRCNN, samples: Sequence[Sample], channel_means, **kwargs):
    """``{id: [(mask, score), ...]}`` for every sample."""
    return {
        s.id: [(d.mask, d.score) for d in predict(model, s, channel_means, **kwargs)] for s in samples
    }


def overlay(image: np.ndarray, masks: Sequence[np.ndarray]) -> np.ndarray:
    """Draw each mask's one-pixel contour onto an ``(H, W, 3)`` uint8 image."""
    out = np.array(image, dtype=np.uint8, copy=True)
    for k, m in enumerate(masks):
        m = np.asarray(m, dtype=bool)
        edge = m & ~ndimage.binary_erosion(m, border_value=0)
        out[edge] = PALETTE[k % len(PALETTE)]
    return out
