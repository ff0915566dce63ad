"""Minimal parameter-module layer over the tensor engine.

Modules register parameters as Tensor attributes and buffers (batchnorm
running stats) as numpy arrays named in ``_buffer_names``; both are
collected recursively with stable dotted names for checkpoints and
optimizers.
"""

from __future__ import annotations

import math

import numpy as np

from . import kernels
from .tensor import Tensor


class Module:
    _buffer_names: tuple = ()

    def __init__(self):
        self.training = True

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def named_buffers(self, prefix: str = ""):
        for name in type(self)._buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            path = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(f"{path}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{path}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, flag: bool = True):
        self.training = flag
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(flag)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item.train(flag)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def set_requires_grad(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0,
                 bias: bool = True, rng: np.random.Generator = None,
                 dtype=np.float32, zero_init: bool = False):
        super().__init__()
        self.stride = stride
        self.padding = padding
        if zero_init:
            w = np.zeros((cout, cin, k, k), dtype=dtype)
        else:
            w = kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return kernels.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(c, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float64)
        self.running_var = np.ones(c, dtype=np.float64)

    def __call__(self, x: Tensor) -> Tensor:
        return kernels.batchnorm(x, self.gamma, self.beta, self.running_mean,
                                 self.running_var, self.training, self.momentum, self.eps)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(kaiming_uniform(rng, (cin, cout), cin, dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        from .tensor import add, matmul
        return add(matmul(x, self.weight), self.bias)
