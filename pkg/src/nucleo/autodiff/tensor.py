"""Tensors, trainable parameters and the reverse-mode tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

STAGE_TAGS = ("head", "upper", "lower")

_TAPES: list["Tape"] = []
# op name -> multiplier applied to its incoming gradient; only used to
# self-test the gradient checker
_BACKWARD_SCALE: dict[str, float] = {}


class Tensor:
    """A dense float array that may take part in differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.dtype})"

    def __add__(self, other):
        from nucleo.autodiff.ops import add

        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        from nucleo.autodiff.ops import scale

        if isinstance(other, Tensor):
            raise TypeError("only scalar multiplication is supported")
        return scale(self, other)

    __rmul__ = __mul__


class Parameter(Tensor):
    """A trainable weight.

    ``stage_tag`` names the training stage that unfreezes it: ``head`` params
    train from the first stage, ``upper`` from the second, ``lower`` only in
    the final end-to-end stage. Frozen params record no gradient.
    """

    __slots__ = ("stage_tag", "momentum_buf")

    def __init__(self, data, stage_tag: str = "head", name: str | None = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)
        if stage_tag not in STAGE_TAGS:
            raise ValueError(f"unknown stage tag {stage_tag!r}")
        self.stage_tag = stage_tag
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool):
        self.requires_grad = bool(flag)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum_buf = self.momentum_buf.astype(dtype)


@dataclass
class Record:
    op: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable ops executed while the tape is active.

    Use as a context manager; ops run inside it are recorded whenever one of
    their inputs requires a gradient.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.remove(self)
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, output: Tensor, grad: np.ndarray | None = None) -> None:
        """Propagate from ``output`` in reverse execution order.

        Gradients of leaf tensors (parameters and user inputs) are added to
        their ``.grad``; intermediate gradients are discarded.
        """
        seed = np.ones_like(output.data) if grad is None else np.asarray(grad, output.dtype)
        grads: dict[int, np.ndarray] = {id(output): seed}
        leaves: dict[int, Tensor] = {}
        if output._leaf:
            leaves[id(output)] = output
        for rec in reversed(self.records):
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            factor = _BACKWARD_SCALE.get(rec.op)
            if factor is not None:
                g = g * factor
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                grads[key] = grads[key] + gi if key in grads else gi
                if t._leaf:
                    leaves[key] = t
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g


def active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def record(
    op: str,
    out: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out`` in a Tensor and log it on the active tape if needed."""
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op} produced non-finite values")
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._leaf = False
        tape.records.append(Record(op, result, tuple(inputs), backward))
    return result


@contextlib.contextmanager
def corrupt_backward(op: str, factor: float = 2.0) -> Iterator[None]:
    """Scale the gradient flowing into ``op`` by ``factor`` (checker self-test)."""
    previous = _BACKWARD_SCALE.get(op)
    _BACKWARD_SCALE[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _BACKWARD_SCALE.pop(op, None)
        else:
            _BACKWARD_SCALE[op] = previous
