"""Thin layer classes over the tensor ops.

A :class:`Module` discovers its parameters by walking instance attributes in
construction order, so parameter enumeration (and therefore checkpoints and
optimizer state) is deterministic for a fixed architecture.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .rng import RandomStream
from .tensor import Tensor


class Module:
    def named_params(self, prefix: str = ""):
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield key, val
            elif isinstance(val, Module):
                yield from val.named_params(f"{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_params(f"{key}.{i}.")

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]

    def num_params(self) -> int:
        return sum(p.size for p in self.params())

    def zero_grad(self) -> None:
        for p in self.params():
            p.grad = None


def _param(data: np.ndarray) -> Tensor:
    return Tensor(data.astype(T.get_default_dtype()), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stream: RandomStream,
                 stride: int = 1, padding: int = 0, dilation: int = 1,
                 groups: int = 1, bias: bool = True, zero_init: bool = False,
                 init_scale: float = 1.0):
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups
        cg = cin // groups
        fan_in = cg * kernel * kernel
        if zero_init:
            w = np.zeros((cout, cg, kernel, kernel))
        else:
            w = stream.normal((cout, cg, kernel, kernel)) \
                * (init_scale * np.sqrt(2.0 / fan_in))
        self.w = _param(w)
        self.b = _param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding,
                        dilation=self.dilation, groups=self.groups)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, stream: RandomStream,
                 stride: int = 1, padding: int = 0, groups: int = 1, bias: bool = True):
        self.stride, self.padding, self.groups = stride, padding, groups
        og = cout // groups
        fan_in = cin // groups * kernel * kernel
        w = stream.normal((cin, og, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        self.w = _param(w)
        self.b = _param(np.zeros(cout)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.w, self.b, stride=self.stride,
                                  padding=self.padding, groups=self.groups)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gamma, self.beta, eps=self.eps)
