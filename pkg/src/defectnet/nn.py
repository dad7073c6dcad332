"""Minimal module/parameter containers on top of :mod:`defectnet.tensor`."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    """Base class: parameters, buffers and child modules are discovered from attributes.

    Attribute insertion order defines the parameter order, which in turn
    defines the checkpoint layout and initialization order.
    """

    training: bool = True

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix, self
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield from val.named_modules(f"{prefix}{key}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_modules(f"{prefix}{key}.{i}.")

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for prefix, mod in self.named_modules():
            for key, val in vars(mod).items():
                if isinstance(val, Tensor) and val.requires_grad:
                    yield f"{prefix}{key}", val

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for prefix, mod in self.named_modules():
            for key, val in vars(mod).items():
                if isinstance(val, np.ndarray):
                    yield f"{prefix}{key}", val

    def state_items(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, as (name, array) pairs in a stable order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def train(self, mode: bool = True) -> "Module":
        for _, mod in self.named_modules():
            mod.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def parameter(shape, fill: float = 0.0) -> Tensor:
    return Tensor(np.full(shape, fill, dtype=T.DTYPE), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.weight = parameter((cout, cin, k, k))
        self.bias = parameter((cout,)) if bias else None

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = T.BN_EPS, momentum: float = T.BN_MOMENTUM):
        self.eps = eps
        self.momentum = momentum
        self.gamma = parameter((c,), 1.0)
        self.shift = parameter((c,), 0.0)
        self.running_mean = np.zeros(c)
        self.running_var = np.ones(c)

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm2d(x, self.gamma, self.shift, eps=self.eps, training=self.training,
                              running_mean=self.running_mean, running_var=self.running_var,
                              momentum=self.momentum)


class Linear(Module):
    def __init__(self, din: int, dout: int):
        self.weight = parameter((din, dout))
        self.bias = parameter((dout,))

    def __call__(self, x: Tensor) -> Tensor:
        return T.fully_connected(x, self.weight, self.bias)


def is_norm_param(name: str) -> bool:
    """True for batch-norm affine parameters (excluded from weight decay)."""
    return name.endswith(".gamma") or name.endswith(".shift")


def init_gaussian(module: Module, rng: np.random.Generator, sigma: float = 0.01) -> None:
    """Conv/FC weights ~ N(0, sigma^2); biases 0; norm gamma 1, shift 0; running stats reset."""
    for name, p in module.named_parameters():
        if name.endswith(".gamma"):
            p.data[...] = 1.0
        elif name.endswith(".shift") or name.endswith(".bias"):
            p.data[...] = 0.0
        else:
            p.data[...] = rng.normal(0.0, sigma, size=p.shape)
    for _, mod in module.named_modules():
        if isinstance(mod, BatchNorm2d):
            mod.running_mean[...] = 0.0
            mod.running_var[...] = 1.0


def find(module: Module, name: str) -> Optional[Tensor]:
    return dict(module.named_parameters()).get(name)
