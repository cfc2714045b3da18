"""Stateful layer wrappers around :mod:`fewbit.diffcore.functional`."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor, get_default_dtype, resolve_dtype


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int, dtype=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(resolve_dtype(dtype))


class Module:
    """Minimal container: discovers parameters, buffers and children by attribute."""

    training: bool = True

    def _buffer_names(self) -> tuple:
        return ()

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for key, value in vars(self).items():
            if isinstance(value, Module):
                yield key, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key in self._buffer_names():
            yield prefix + key, getattr(self, key)
        for key, child in self.children():
            yield from child.named_buffers(prefix + key + ".")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"state is missing entries: {sorted(missing)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)
            p.zero_grad()
        for name, buf in buffers.items():
            value = np.asarray(state[name])
            if value.shape != buf.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != {buf.shape}")
            buf[...] = value

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, child in self.children():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def to(self, dtype) -> "Module":
        dtype = resolve_dtype(dtype)
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.zero_grad()
        for module in self._modules():
            for key in module._buffer_names():
                setattr(module, key, getattr(module, key).astype(dtype))
        return self

    def _modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child._modules()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=None):
        dtype = dtype or get_default_dtype()
        self.weight = Parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype), "weight")
        self.bias = Parameter(np.zeros(out_features, dtype=dtype), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return F.dense(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, kernel_size: int = 3, dtype=None):
        if kernel_size != 3:
            raise ValueError(f"only 3x3 kernels are supported, got {kernel_size}")
        dtype = dtype or get_default_dtype()
        shape = (out_channels, in_channels, 3, 3)
        self.weight = Parameter(glorot_uniform(rng, shape, in_channels * 9, out_channels * 9, dtype), "weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), "bias")

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    def __init__(self, num_features: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gamma = Parameter(np.ones(num_features, dtype=dtype), "gamma")
        self.beta = Parameter(np.zeros(num_features, dtype=dtype), "beta")
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def _buffer_names(self) -> tuple:
        return ("running_mean", "running_var")

    def forward(self, x: Tensor) -> Tensor:
        return F.batchnorm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                           training=self.training, momentum=self.momentum, eps=self.eps)
