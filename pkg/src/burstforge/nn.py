"""Minimal module system: named parameters, seeded init, conv layers."""
from __future__ import annotations

import zlib
from typing import Iterator, Optional

import numpy as np

from . import ops
from .tensor import Tensor, _as_dtype


class Parameter(Tensor):
    __slots__ = ("init", "fan_in", "gain")

    def __init__(self, shape, init: str = "he_normal", fan_in: int = 1, dtype="f32", gain: float = 1.0):
        super().__init__(np.zeros(shape, dtype=_as_dtype(dtype)), requires_grad=True)
        self.init = init
        self.fan_in = fan_in
        self.gain = gain


def _param_rng(seed: int, name: str) -> np.random.Generator:
    # keyed by name so a parameter's values don't depend on construction order
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                yield name, value
            else:
                yield from value.named_parameters(name + ".")

    def parameters(self) -> dict[str, Parameter]:
        return dict(self.named_parameters())

    def num_parameters(self) -> int:
        return int(sum(p.data.size for _, p in self.named_parameters()))

    def initialize(self, seed: int) -> None:
        for name, p in self.named_parameters():
            if p.init == "zeros":
                p.data[...] = 0
            elif p.init == "he_normal":
                std = p.gain * np.sqrt(2.0 / p.fan_in)
                p.data[...] = _param_rng(seed, name).standard_normal(p.shape) * std
            else:
                raise ValueError(f"unknown init {p.init!r} for {name}")

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None


class Conv(Module):
    """k x k convolution layer, padding (k-1)/2 unless given."""

    def __init__(self, cin: int, cout: int, k: int = 3, stride: int = 1, groups: int = 1,
                 bias: bool = False, zero_init: bool = False, gain: float = 1.0, dtype="f32"):
        self.spec = ops.ConvSpec(cin, cout, k, stride, None, groups, bias)
        fan_in = (cin // groups) * k * k
        self.weight = Parameter(self.spec.weight_shape, "zeros" if zero_init else "he_normal", fan_in, dtype, gain)
        self.bias: Optional[Parameter] = Parameter((cout,), "zeros", 1, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.spec.stride,
                          padding=self.spec.pad, groups=self.spec.groups)


class TConv(Module):
    """3x3 stride-2 transposed convolution (exact x2 upsampling)."""

    def __init__(self, cin: int, cout: int, k: int = 3, dtype="f32"):
        # each output pixel receives ~k*k/4 taps per input channel
        self.weight = Parameter((cin, cout, k, k), "he_normal", max(1, cin * k * k // 4), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.transposed_conv2d(x, self.weight, stride=2, padding=1)
