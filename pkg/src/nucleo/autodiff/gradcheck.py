"""Central finite-difference certification of backward passes."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from nucleo.autodiff.tensor import Tape, Tensor


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return np.abs(a - n) / denom


def analytic_grads(fn: Callable[..., Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    tape.backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-3,
    coords: Sequence[np.ndarray | None] | None = None,
) -> float:
    """Largest relative error between tape gradients and central differences.

    Args:
        fn: Scalar-valued function of the ``inputs`` tensors.
        inputs: Float64 tensors; perturbed in place and restored.
        eps: Finite-difference step.
        coords: Optional per-input flat indices to check; ``None`` checks all.

    Returns:
        ``max |a - fd| / max(|a|, |fd|, 1e-8)`` over every checked coordinate.
    """
    grads = analytic_grads(fn, inputs)
    worst = 0.0
    for k, (t, g) in enumerate(zip(inputs, grads)):
        flat = t.data.reshape(-1)
        idx = range(flat.size) if coords is None or coords[k] is None else coords[k]
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn(*inputs).data)
            flat[i] = orig - eps
            down = float(fn(*inputs).data)
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], fd)))
    return worst
