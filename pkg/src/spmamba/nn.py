"""Parameter containers on top of the tensor core."""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import RunningStats, Tensor


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return param(rng.uniform(-bound, bound, size=shape))


class Module:
    """Base class; parameters and child modules are discovered from attributes in assignment order."""

    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            yield name, value

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")
        yield from self._own_buffers(prefix)

    def _own_buffers(self, prefix: str) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, p in self.named_parameters():
            out[name] = p.data
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"missing entries in state: {sorted(missing)[:5]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {state[name].shape} vs {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)
        for name, b in buffers.items():
            b[...] = state[name]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1,
                 pad: int | None = None, groups: int = 1, bias: bool = True):
        self.stride, self.pad, self.groups = stride, (k - 1) // 2 if pad is None else pad, groups
        fan_in = (cin // groups) * k * k
        self.weight = uniform_init(rng, (cout, cin // groups, k, k), fan_in)
        self.bias = uniform_init(rng, (cout,), fan_in) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)


class BatchNorm2d(Module):
    def __init__(self, c: int, eps: float = 1e-5, momentum: float = 0.1):
        self.eps = eps
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))
        self._stats = RunningStats(np.zeros(c), np.ones(c), momentum)

    def _own_buffers(self, prefix):
        yield f"{prefix}running_mean", self._stats.mean
        yield f"{prefix}running_var", self._stats.var

    def forward(self, x: Tensor) -> Tensor:
        mode = "train" if self.training else "eval"
        return T.batchnorm2d(x, self.gamma, self.beta, self.eps, mode, self._stats)


class LayerNorm2d(Module):
    """Channel-wise layer norm for NCHW maps."""

    def __init__(self, c: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = param(np.ones(c))
        self.beta = param(np.zeros(c))

    def forward(self, x: Tensor) -> Tensor:
        return T.layer_norm_channels(x, self.gamma, self.beta, self.eps)


class Linear(Module):
    def __init__(self, fin: int, fout: int, rng: np.random.Generator, bias: bool = True):
        self.weight = uniform_init(rng, (fout, fin), fin)
        self.bias = uniform_init(rng, (fout,), fin) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class ConvBNAct(Module):
    """conv (no bias) → batch norm → SiLU, the workhorse unit of the detector."""

    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, stride: int = 1, groups: int = 1):
        self.conv = Conv2d(cin, cout, k, rng, stride=stride, groups=groups, bias=False)
        self.bn = BatchNorm2d(cout)

    def forward(self, x: Tensor) -> Tensor:
        return T.silu(self.bn(self.conv(x)))
