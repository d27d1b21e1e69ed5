"""Decoupled ROI heads: a fully connected class/box branch and a conv mask branch."""

from __future__ import annotations

import numpy as np

from nucleo.autodiff import ops
from nucleo.autodiff.nn import Conv2d, ConvTranspose2d, Linear, Module
from nucleo.autodiff.tensor import Tensor

NUM_CLASSES = 2


class BoxHead(Module):
    def __init__(self, channels, pool_size=7, hidden=128, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc1 = Linear(channels * pool_size * pool_size, hidden, rng=rng, dtype=dtype)
        self.fc2 = Linear(hidden, hidden, rng=rng, dtype=dtype)
        self.cls = Linear(hidden, NUM_CLASSES, rng=rng, dtype=dtype)
        self.box = Linear(hidden, 4, rng=rng, dtype=dtype)

    def __call__(self, pooled: Tensor) -> tuple[Tensor, Tensor]:
        r = pooled.shape[0]
        x = ops.reshape(pooled, (r, -1))
        x = ops.relu(self.fc1(x))
        x = ops.relu(self.fc2(x))
        return self.cls(x), self.box(x)


class MaskHead(Module):
    """Four 3x3 convs, a 2x transposed conv and a 1x1 logit conv."""

    def __init__(self, channels, n_convs=4, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.convs = [Conv2d(channels, channels, 3, rng=rng, dtype=dtype) for _ in range(n_convs)]
        self.up = ConvTranspose2d(channels, channels, 2, rng=rng, dtype=dtype)
        self.logits = Conv2d(channels, 1, 1, rng=rng, dtype=dtype)

    def __call__(self, pooled: Tensor) -> Tensor:
        x = pooled
        for conv in self.convs:
            x = ops.relu(conv(x))
        return self.logits(ops.relu(self.up(x)))


def heads_forward(box_head: BoxHead, mask_head: MaskHead, pooled_cls: Tensor, pooled_mask: Tensor):
    """Class logits ``(R, 2)``, box deltas ``(R, 4)`` and mask logits ``(R', 1, 2p, 2p)``.

    The mask branch never sees the class branch's output.
    """
    dtype = pooled_cls.dtype
    if pooled_cls.shape[0] == 0:
        cls, box = Tensor(np.zeros((0, NUM_CLASSES), dtype)), Tensor(np.zeros((0, 4), dtype))
    else:
        cls, box = box_head(pooled_cls)
    if pooled_mask.shape[0] == 0:
        side = 2 * pooled_mask.shape[-1]
        mask = Tensor(np.zeros((0, 1, side, side), dtype))
    else:
        mask = mask_head(pooled_mask)
    return cls, box, mask
