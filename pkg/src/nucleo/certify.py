"""Finite-difference certification of every differentiable op.

Each registered op is reduced to a scalar with random constant weights and
checked at float64 on several random shapes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from nucleo.autodiff import (
    Tensor,
    bilinear_resize,
    conv2d,
    conv_transpose2d,
    corrupt_backward,
    grad_check,
    linear,
    max_pool2d,
    relu,
    sigmoid_bce,
    smooth_l1,
    softmax_cross_entropy,
    weighted_sum,
)
from nucleo.detection.roi_align import roi_align

TOLERANCE = 1e-4
EPS = 1e-5
TRIALS = 5


@dataclass(frozen=True)
class CheckResult:
    op: str
    max_error: float
    trials: int

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _reduce(out: Tensor, rng) -> tuple[Callable[[Tensor], Tensor], np.ndarray]:
    w = rng.normal(size=out.shape)
    return (lambda y: weighted_sum(y, w)), w


def _case_conv2d(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.choice([1, 3]))
    stride = int(rng.choice([1, 2]))
    h = w = 2 * int(rng.integers(2, 4)) + k % 2
    pad = k // 2 if stride == 1 else 0
    if stride == 2 and (h - k) % 2:
        h = w = h + 1
    x, wt, b = _t(rng.normal(size=(n, c, h, w))), _t(rng.normal(size=(f, c, k, k))), _t(rng.normal(size=f))
    red, _ = _reduce(conv2d(x, wt, b, stride, pad), rng)
    return (lambda x, wt, b: red(conv2d(x, wt, b, stride, pad))), [x, wt, b]


def _case_conv_transpose2d(rng):
    n, c, f = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
    h, w = rng.integers(1, 4, size=2)
    x, wt, b = _t(rng.normal(size=(n, c, h, w))), _t(rng.normal(size=(c, f, 2, 2))), _t(rng.normal(size=f))
    red, _ = _reduce(conv_transpose2d(x, wt, b), rng)
    return (lambda x, wt, b: red(conv_transpose2d(x, wt, b))), [x, wt, b]


def _case_relu(rng):
    shape = tuple(rng.integers(1, 5, size=3))
    # keep every input well away from the kink
    a = rng.uniform(0.1, 2.0, size=shape) * rng.choice([-1.0, 1.0], size=shape)
    x = _t(a)
    red, _ = _reduce(relu(x), rng)
    return (lambda x: red(relu(x))), [x]


def _case_max_pool2d(rng):
    n, c = rng.integers(1, 3), rng.integers(1, 3)
    h, w = 2 * rng.integers(1, 4, size=2)
    # distinct values spaced far beyond eps so the argmax never flips
    a = rng.permutation(n * c * h * w).reshape(n, c, h, w) * 0.1
    x = _t(a)
    red, _ = _reduce(max_pool2d(x), rng)
    return (lambda x: red(max_pool2d(x))), [x]


def _case_bilinear_resize(rng):
    c = rng.integers(1, 3)
    h, w = rng.integers(2, 6, size=2)
    oh, ow = rng.integers(2, 10, size=2)
    x = _t(rng.normal(size=(1, c, h, w)))
    red, _ = _reduce(bilinear_resize(x, oh, ow), rng)
    return (lambda x: red(bilinear_resize(x, oh, ow))), [x]


def _case_linear(rng):
    r, d, o = rng.integers(1, 6, size=3)
    x, wt, b = _t(rng.normal(size=(r, d))), _t(rng.normal(size=(o, d))), _t(rng.normal(size=o))
    red, _ = _reduce(linear(x, wt, b), rng)
    return (lambda x, wt, b: red(linear(x, wt, b))), [x, wt, b]


def _case_roi_align(rng):
    c = rng.integers(1, 3)
    stride = float(rng.choice([4, 8]))
    h, w = rng.integers(3, 7, size=2)
    lo = rng.uniform(-4, [w * stride * 0.6, h * stride * 0.6], size=(3, 2))
    size = rng.uniform(2, stride * 3, size=(3, 2))
    rois = np.concatenate([lo, lo + size], axis=1)
    out = int(rng.choice([2, 3, 7]))
    x = _t(rng.normal(size=(1, c, h, w)))
    red, _ = _reduce(roi_align(x, rois, stride, out), rng)
    return (lambda x: red(roi_align(x, rois, stride, out))), [x]


def _case_softmax_cross_entropy(rng):
    n, k = rng.integers(2, 8), rng.integers(2, 5)
    labels = rng.integers(-1, k, size=n)
    labels[0] = 0
    x = _t(rng.normal(size=(n, k)))
    return (lambda x: softmax_cross_entropy(x, labels)), [x]


def _case_smooth_l1(rng):
    shape = (int(rng.integers(1, 6)), 4)
    target = rng.normal(size=shape)
    # residuals kept at least 0.1 away from the |d| = 1 seam
    mag = np.where(rng.random(shape) < 0.5, rng.uniform(0.0, 0.9, shape), rng.uniform(1.1, 3.0, shape))
    x = _t(target + mag * rng.choice([-1.0, 1.0], size=shape))
    return (lambda x: smooth_l1(x, target)), [x]


def _case_sigmoid_bce(rng):
    shape = tuple(rng.integers(1, 6, size=2))
    t = rng.integers(0, 2, size=shape).astype(np.float64)
    x = _t(rng.normal(scale=3.0, size=shape))
    return (lambda x: sigmoid_bce(x, t)), [x]


REGISTRY: dict[str, Callable] = {
    "conv2d": _case_conv2d,
    "conv_transpose2d": _case_conv_transpose2d,
    "relu": _case_relu,
    "max_pool2d": _case_max_pool2d,
    "bilinear_resize": _case_bilinear_resize,
    "linear": _case_linear,
    "roi_align": _case_roi_align,
    "softmax_cross_entropy": _case_softmax_cross_entropy,
    "smooth_l1": _case_smooth_l1,
    "sigmoid_bce": _case_sigmoid_bce,
}


def check_op(name: str, seed: int = 0, trials: int = TRIALS, corrupt: bool = False) -> CheckResult:
    make = REGISTRY[name]
    worst = 0.0
    ctx = corrupt_backward(name) if corrupt else contextlib.nullcontext()
    with ctx:
        for k in range(trials):
            fn, inputs = make(np.random.default_rng([seed, k]))
            worst = max(worst, grad_check(fn, inputs, eps=EPS))
    return CheckResult(name, worst, trials)


def certify(seed: int = 0, corrupt: str | None = None, ops=None) -> list[CheckResult]:
    """Check every op in ``ops`` (default: the whole registry).

    ``corrupt`` names one op whose backward is deliberately doubled, which
    must make its row fail.
    """
    if corrupt is not None and corrupt not in REGISTRY:
        raise KeyError(f"unknown op {corrupt!r}; choose from {', '.join(REGISTRY)}")
    names = list(REGISTRY) if ops is None else list(ops)
    return [check_op(n, seed, corrupt=(n == corrupt)) for n in names]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.op) for r in results)
    lines = [f"{'op':<{width}}  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.op:<{width}}  {r.max_error:13.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
