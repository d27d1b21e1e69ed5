"""Layer containers with stage-tagged parameters."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from nucleo.autodiff import ops
from nucleo.autodiff.tensor import Parameter, Tensor


class Module:
    """Base class; parameters are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{name}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def astype(self, dtype):
        for p in self.parameters():
            p.astype(dtype)
        return self


def he_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in, c_out, k, *, pad=None, stride=1, stage="head", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (c_out, c_in, k, k), c_in * k * k, dtype), stage)
        self.bias = Parameter(np.zeros(c_out, dtype), stage)
        self.stride = stride
        self.pad = (k - 1) // 2 if pad is None else pad

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, k=2, *, stage="head", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (c_in, c_out, k, k), c_in, dtype), stage)
        self.bias = Parameter(np.zeros(c_out, dtype), stage)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias)


class Linear(Module):
    def __init__(self, d_in, d_out, *, stage="head", rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(he_uniform(rng, (d_out, d_in), d_in, dtype), stage)
        self.bias = Parameter(np.zeros(d_out, dtype), stage)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)
