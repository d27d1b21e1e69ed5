"""Micro backbone and feature pyramid."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from nucleo.autodiff import ops
from nucleo.autodiff.nn import Conv2d, Module
from nucleo.autodiff.tensor import Tensor

STRIDES = (4, 8, 16, 32)


class Stage(Module):
    """``convs`` 3x3 conv + ReLU layers followed by 2x2 max pooling."""

    def __init__(self, c_in, c_out, convs, stage_tag, rng, dtype):
        self.convs = [
            Conv2d(c_in if i == 0 else c_out, c_out, 3, stage=stage_tag, rng=rng, dtype=dtype)
            for i in range(convs)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return ops.max_pool2d(x)


class MicroBackbone(Module):
    """Five pooling stages; outputs the stride 4/8/16/32 maps C2..C5.

    The stem and the C2, C3 stages are tagged ``lower``; C4 and C5 are
    ``upper``, so they unfreeze one training stage before the lower layers.
    """

    def __init__(self, widths=(16, 32, 64, 128), stem_width=16, convs_per_stage=1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stem = Stage(3, stem_width, 1, "lower", rng, dtype)
        chans = (stem_width,) + tuple(widths)
        tags = ("lower", "lower", "upper", "upper")
        self.stages = [
            Stage(chans[i], chans[i + 1], convs_per_stage, tags[i], rng, dtype) for i in range(4)
        ]
        self.out_channels = tuple(widths)

    def __call__(self, image: Tensor) -> list[Tensor]:
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ValueError(f"image dims {h}x{w} must be multiples of 32; pad first")
        x = self.stem(image)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats


class FPN(Module):
    """Lateral 1x1 convs, a bilinear 2x top-down pathway and 3x3 smoothing."""

    def __init__(self, in_channels: Sequence[int], channels=32, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.lateral = [Conv2d(c, channels, 1, rng=rng, dtype=dtype) for c in in_channels]
        self.smooth = [Conv2d(channels, channels, 3, rng=rng, dtype=dtype) for _ in in_channels]
        self.channels = channels

    def __call__(self, stages: Sequence[Tensor]) -> list[Tensor]:
        merged = [None] * len(stages)
        top = None
        for i in reversed(range(len(stages))):
            lat = self.lateral[i](stages[i])
            if top is not None:
                lat = ops.add(lat, ops.bilinear_resize(top, lat.shape[2], lat.shape[3]))
            merged[i] = top = lat
        return [s(m) for s, m in zip(self.smooth, merged)]
