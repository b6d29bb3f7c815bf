"""Parameterized layers and the module container."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor


class Parameter(Tensor):
    """Trainable tensor. ``kernel`` marks weights subject to the L2 regularizer."""

    def __init__(self, data, kernel: bool = False, name: str | None = None):
        super().__init__(np.array(data, copy=True), requires_grad=True, name=name)
        self.kernel = kernel


class Module:
    """Ordered container. Attributes are registered in assignment order, which
    fixes parameter enumeration order (and therefore checkpoint layout)."""

    def __init__(self):
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for k, p in self._params.items():
            yield prefix + k, p
        for k, m in self._modules.items():
            yield from m.named_parameters(prefix + k + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self._buffers:
            yield prefix + k, getattr(self, k)
        for k, m in self._modules.items():
            yield from m.named_buffers(prefix + k + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for k, m in self._modules.items():
            yield from m.named_modules(prefix + k + ".")

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            object.__setattr__(m, "training", mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        """Element count of parameters plus running buffers."""
        return sum(p.size for p in self.parameters()) + sum(b.size for _, b in self.named_buffers())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Parameters then buffers, declaration order."""
        return [(n, p.data) for n, p in self.named_parameters()] + list(self.named_buffers())

    def load_state_arrays(self, arrays: list[np.ndarray]) -> None:
        targets = self.state_arrays()
        if len(arrays) != len(targets):
            raise ValueError(f"expected {len(targets)} arrays, got {len(arrays)}")
        for (name, dst), src in zip(targets, arrays):
            if dst.shape != src.shape:
                raise ValueError(f"{name}: shape {src.shape} != {dst.shape}")
            dst[...] = src

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def he_normal(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel_size=1, stride=1, groups=1, bias=True, padding="same",
                 rng=None, dtype=np.float64):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel_size = in_ch, out_ch, kernel_size
        self.stride, self.groups, self.padding = stride, groups, padding
        fan_in = in_ch // groups * kernel_size * kernel_size
        self.weight = Parameter(he_normal(rng, (out_ch, in_ch // groups, kernel_size, kernel_size), fan_in, dtype), kernel=True)
        if bias:
            self.bias = Parameter(np.zeros(out_ch, dtype=dtype))
        else:
            self.bias = None

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_shape(self, shape):
        c, h, w = shape
        ho = ops.conv_output_size(h, self.kernel_size, self.stride, self.padding)[0]
        wo = ops.conv_output_size(w, self.kernel_size, self.stride, self.padding)[0]
        return (self.out_ch, ho, wo)

    def macs(self, out_shape) -> int:
        c, h, w = out_shape
        return h * w * c * self.kernel_size * self.kernel_size * (self.in_ch // self.groups)


class BatchNorm2d(Module):
    def __init__(self, channels, momentum=0.99, eps=1e-3, dtype=np.float64):
        super().__init__()
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))
        # precise-BN accumulation: (count, sum, sum of squares) or None
        self._accum = None

    def forward(self, x):
        if self._accum is not None:
            # normalize with batch statistics, leave running buffers untouched
            axes = (0,) + tuple(range(2, x.ndim))
            a = x.data.astype(np.float64)
            n, s, sq = self._accum
            self._accum = (n + a.size // self.channels, s + a.sum(axis=axes), sq + (a * a).sum(axis=axes))
            return ops.batch_norm(x, self.gamma, self.beta, self.running_mean.copy(), self.running_var.copy(),
                                  True, self.momentum, self.eps)
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var,
                              self.training, self.momentum, self.eps)

    def begin_accumulate(self) -> None:
        self._accum = (0, 0.0, 0.0)

    def end_accumulate(self) -> None:
        """Replace running statistics with the accumulated population moments."""
        n, s, sq = self._accum
        self._accum = None
        if n == 0:
            return
        mean = s / n
        self.running_mean[...] = mean
        self.running_var[...] = np.maximum(sq / n - mean * mean, 0.0)


class Dense(Module):
    def __init__(self, in_features, out_features, bias=True, rng=None, dtype=np.float64, kernel=False):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(glorot_uniform(rng, (in_features, out_features), in_features, out_features, dtype),
                                kernel=kernel)
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y
