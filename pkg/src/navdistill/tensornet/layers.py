"""Parameter containers and the small layer set the navigation networks use."""

from __future__ import annotations

import copy
import hashlib
import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from navdistill.tensornet.tensor import Tensor, conv2d, conv_output_size, fully_connected, relu


class Module:
    """Base class: parameters and submodules are discovered in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def paramset(self) -> "ParamSet":
        return ParamSet(OrderedDict(self.named_parameters()), fingerprint=self.fingerprint())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def spec(self) -> str:
        """Layer spec string; architectures with equal specs are interchangeable."""
        parts = [type(self).__name__]
        for name, p in self.named_parameters():
            parts.append(f"{name}:{'x'.join(map(str, p.shape))}")
        return ";".join(parts)

    def fingerprint(self) -> str:
        return hashlib.sha256(self.spec().encode()).hexdigest()[:16]

    def clone(self) -> "Module":
        dup = copy.deepcopy(self)
        for p in dup.parameters():
            p.grad = None
        return dup

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.named_parameters())

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = OrderedDict(self.named_parameters())
        if list(params) != list(state):
            raise KeyError(f"parameter names differ: expected {list(params)}, got {list(state)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)


class ParamSet:
    """Named parameters in a fixed order plus Adam moments and step counter."""

    def __init__(self, params: "OrderedDict[str, Tensor]", fingerprint: str = "", metadata: dict | None = None):
        self.params = OrderedDict(params)
        self.fingerprint = fingerprint
        self.metadata = dict(metadata or {})
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


def _uniform(rng: np.random.Generator, shape, fan_in: int, gain: float, dtype) -> Tensor:
    bound = gain * math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32,
                 gain: float = 1.0):
        self.weight = _uniform(rng, (in_features, out_features), in_features, gain, dtype)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return fully_connected(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator, dtype=np.float32):
        fan_in = in_channels * kernel * kernel
        self.weight = _uniform(rng, (out_channels, in_channels, kernel, kernel), fan_in, 1.0, dtype)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.weight.shape[2], self.stride, self.padding)


class MLP(Module):
    """Fully-connected stack with relu between layers (none after the last)."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, dtype=np.float32, out_gain: float = 1.0):
        self.layers = [
            Linear(a, b, rng, dtype, gain=out_gain if i == len(sizes) - 2 else 1.0)
            for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:]))
        ]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x
