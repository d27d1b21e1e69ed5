"""Scalar loss primitives; each returns the mean over contributing elements."""

from __future__ import annotations

import numpy as np
from scipy.special import expit, log_softmax, softmax

from nucleo.autodiff.tensor import Tensor, record


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood over rows whose label is not ``-1``.

    If every row is ignored the loss is 0 with a zero gradient.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = logits.shape
    if len(labels) != n:
        raise ValueError(f"{n} logit rows but {len(labels)} labels")
    if np.any((labels < -1) | (labels >= k)):
        raise ValueError(f"labels must lie in [0, {k}) or be -1")
    valid = labels >= 0
    count = int(valid.sum())
    rows = np.flatnonzero(valid)
    if count == 0:
        return record(
            "softmax_cross_entropy",
            np.zeros((), logits.dtype),
            (logits,),
            lambda g: (np.zeros_like(logits.data),),
        )
    logp = log_softmax(logits.data[rows], axis=1)
    loss = -logp[np.arange(count), labels[rows]].sum() / count

    def backward(g):
        grad = np.zeros_like(logits.data)
        p = softmax(logits.data[rows], axis=1)
        p[np.arange(count), labels[rows]] -= 1.0
        grad[rows] = p * (g / count)
        return (grad,)

    return record("softmax_cross_entropy", np.asarray(loss, logits.dtype), (logits,), backward)


def smooth_l1(pred: Tensor, target, beta: float = 1.0) -> Tensor:
    """Huber-style loss: ``0.5 d^2 / beta`` inside ``|d| < beta``, else ``|d| - beta/2``."""
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    n = pred.data.size
    if n == 0:
        return record("smooth_l1", np.zeros((), pred.dtype), (pred,), lambda g: (np.zeros_like(pred.data),))
    d = pred.data - target
    ad = np.abs(d)
    inner = ad < beta
    per = np.where(inner, 0.5 * d * d / beta, ad - 0.5 * beta)

    def backward(g):
        return (np.where(inner, d / beta, np.sign(d)) * (g / n),)

    return record("smooth_l1", np.asarray(per.sum() / n, pred.dtype), (pred,), backward)


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Binary cross-entropy on logits, in the overflow-free log-sum form."""
    t = np.asarray(targets, dtype=logits.dtype)
    if t.shape != logits.shape:
        raise ValueError(f"shape mismatch {logits.shape} vs {t.shape}")
    n = logits.data.size
    if n == 0:
        return record("sigmoid_bce", np.zeros((), logits.dtype), (logits,), lambda g: (np.zeros_like(logits.data),))
    x = logits.data
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return ((expit(x) - t) * (g / n),)

    return record("sigmoid_bce", np.asarray(per.sum() / n, logits.dtype), (logits,), backward)
