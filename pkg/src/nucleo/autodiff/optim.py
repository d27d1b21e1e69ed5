from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from nucleo.autodiff.tensor import Parameter


def global_grad_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in params))


def sgd_momentum_step(
    params: Sequence[Parameter],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
    clip_norm: float = math.inf,
) -> float:
    """One SGD-with-momentum update over the trainable members of ``params``.

    The gradient is rescaled so its global L2 norm is at most ``clip_norm``,
    then ``weight_decay * value`` is added, then
    ``buf = momentum * buf + grad`` and ``value -= lr * buf``.
    Frozen parameters are not touched.

    Returns:
        The global gradient norm before clipping.

    Raises:
        FloatingPointError: if any trainable gradient is not finite. No
            parameter is modified in that case.
    """
    live = [p for p in params if p.trainable]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    norm = global_grad_norm(live)
    factor = clip_norm / norm if norm > clip_norm else 1.0
    for p in live:
        g = p.grad * factor
        if weight_decay:
            g = g + weight_decay * p.data
        p.momentum_buf *= momentum
        p.momentum_buf += g.astype(p.dtype, copy=False)
        p.data -= lr * p.momentum_buf
    return norm
