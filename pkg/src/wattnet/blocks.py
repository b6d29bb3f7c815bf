"""Wide MBConv block, squeeze-and-excite gating and the WATT stage."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .attention import Attention
from .errors import ConfigurationError
from .nn import BatchNorm2d, Conv2d, Module, Parameter, he_normal
from .tensor import Tensor, _wrap


@dataclass
class SEParams:
    squeeze: Tensor  # [C/rho, C]
    excite: Tensor  # [C, C/rho]
    squeeze_bias: Tensor | None = None
    excite_bias: Tensor | None = None

    @property
    def channels(self) -> int:
        return self.squeeze.shape[1]


def se_block(x: Tensor, params: SEParams) -> Tensor:
    """Scale each channel of ``x`` by sigmoid(W_ex relu(W_sq gap(x)))."""
    x = _wrap(x)
    N, C = x.shape[:2]
    if C != params.channels or params.excite.shape[0] != C:
        raise ConfigurationError(f"SE weights built for {params.channels} channels, input has {C}")
    s = ops.global_avg_pool(x).reshape(N, C) @ params.squeeze.T
    if params.squeeze_bias is not None:
        s = s + params.squeeze_bias
    s = s.relu() @ params.excite.T
    if params.excite_bias is not None:
        s = s + params.excite_bias
    return x * s.sigmoid().reshape(N, C, 1, 1)


class SqueezeExcite(Module):
    """SE gate; the two 1x1 convolutions act on pooled vectors, so they are
    stored as matrices (``[out, in]``, same element count as conv kernels)."""

    def __init__(self, channels: int, ratio: int = 4, bias: bool = True, rng=None, dtype=np.float64):
        super().__init__()
        if ratio < 1 or channels % ratio:
            raise ConfigurationError(f"SE ratio {ratio} must divide channels {channels}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // ratio
        self.channels, self.ratio = channels, ratio
        self.squeeze = Parameter(he_normal(rng, (hidden, channels), channels, dtype), kernel=True)
        self.squeeze_bias = Parameter(np.zeros(hidden, dtype=dtype)) if bias else None
        self.excite = Parameter(he_normal(rng, (channels, hidden), hidden, dtype), kernel=True)
        self.excite_bias = Parameter(np.zeros(channels, dtype=dtype)) if bias else None

    @property
    def params(self) -> SEParams:
        return SEParams(self.squeeze, self.excite, self.squeeze_bias, self.excite_bias)

    def forward(self, x):
        return se_block(x, self.params)

    def macs(self, shape) -> int:
        c, h, w = shape
        hidden = c // self.ratio
        return c * h * w + 2 * c * hidden + c * h * w  # pool, two matmuls, gating


class ConvBN(Module):
    """Convolution, batch norm, optional ReLU."""

    def __init__(self, in_ch, out_ch, kernel_size=1, stride=1, groups=1, bias=True, act=True,
                 bn_momentum=0.99, bn_eps=1e-3, rng=None, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(in_ch, out_ch, kernel_size, stride, groups, bias, rng=rng, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, bn_momentum, bn_eps, dtype=dtype)
        self.act = act

    def forward(self, x):
        y = self.bn(self.conv(x))
        return y.relu() if self.act else y


@dataclass
class WideMBConvParams:
    """Shape description of one wide MBConv block.

    ``base_width`` is the unwidened expanded width l; every internal layer of the
    block carries ``k * base_width`` channels.
    """

    in_channels: int
    out_channels: int
    base_width: int
    k: int = 1
    kernel_size: int = 5
    stride: int = 1
    se_ratio: int = 4
    n_depthwise: int = 2
    bias: bool = True

    @property
    def width(self) -> int:
        return self.k * self.base_width

    def validate(self) -> None:
        if self.k < 1:
            raise ConfigurationError(f"width multiplier k must be >= 1, got {self.k}")
        if min(self.in_channels, self.out_channels, self.base_width) < 1:
            raise ConfigurationError("channel counts must be positive")
        if self.n_depthwise < 1:
            raise ConfigurationError("a block needs at least one depthwise layer")
        if self.width % self.se_ratio:
            raise ConfigurationError(f"SE ratio {self.se_ratio} must divide width {self.width}")


class WideMBConv(Module):
    """1x1 expand -> depthwise KxK (x n_depthwise) -> SE -> 1x1 project.

    Every convolution is followed by BN and ReLU; the SE gate has neither.
    The first depthwise layer carries the block stride.
    """

    def __init__(self, p: WideMBConvParams, bn_momentum=0.99, bn_eps=1e-3, rng=None, dtype=np.float64):
        super().__init__()
        p.validate()
        rng = rng or np.random.default_rng(0)
        self.p = p
        c = p.width
        kw = dict(bias=p.bias, bn_momentum=bn_momentum, bn_eps=bn_eps, rng=rng, dtype=dtype)
        self.expand = ConvBN(p.in_channels, c, 1, **kw)
        for i in range(p.n_depthwise):
            stride = p.stride if i == 0 else 1
            setattr(self, f"depthwise{i}", ConvBN(c, c, p.kernel_size, stride, groups=c, **kw))
        self.se = SqueezeExcite(c, p.se_ratio, p.bias, rng=rng, dtype=dtype)
        self.project = ConvBN(c, p.out_channels, 1, **kw)

    @property
    def depthwise_layers(self) -> list[ConvBN]:
        return [getattr(self, f"depthwise{i}") for i in range(self.p.n_depthwise)]

    def forward(self, x):
        x = _wrap(x)
        if x.shape[1] != self.p.in_channels:
            raise ConfigurationError(f"block expects {self.p.in_channels} input channels, got {x.shape[1]}")
        y = self.expand(x)
        for layer in self.depthwise_layers:
            y = layer(y)
        return self.project(self.se(y))


def wide_mbconv(x: Tensor, block: WideMBConv) -> Tensor:
    return block(x)


SKIP_POLICIES = ("auto", "identity", "project", "none")


class WattStage(Module):
    """``y = skip(x) + attention(block(x))``; attention optional.

    Skip policies: "identity" requires matching shapes (else ConfigurationError);
    "project" adds a 1x1 conv+BN projection when shapes differ; "auto" uses the
    identity when shapes match and no skip otherwise; "none" never skips.
    """

    def __init__(self, p: WideMBConvParams, attention: bool = True, reduction: int = 8, skip: str = "auto",
                 bn_momentum=0.99, bn_eps=1e-3, rng=None, dtype=np.float64):
        super().__init__()
        if skip not in SKIP_POLICIES:
            raise ConfigurationError(f"unknown skip policy {skip!r}")
        rng = rng or np.random.default_rng(0)
        self.p = p
        self.attention_enabled = attention
        self.block = WideMBConv(p, bn_momentum, bn_eps, rng=rng, dtype=dtype)
        self.attention = Attention(p.out_channels, reduction, rng=rng, dtype=dtype) if attention else None
        shapes_match = p.in_channels == p.out_channels and p.stride == 1
        if skip == "identity" and not shapes_match:
            raise ConfigurationError(
                f"identity skip impossible: {p.in_channels}->{p.out_channels} channels, stride {p.stride}"
            )
        self.skip_mode = "identity" if shapes_match and skip != "none" else ("project" if skip == "project" else "none")
        if self.skip_mode == "project":
            self.skip_proj = ConvBN(p.in_channels, p.out_channels, 1, p.stride, bias=False, act=False,
                                    bn_momentum=bn_momentum, bn_eps=bn_eps, rng=rng, dtype=dtype)

    def forward(self, x):
        x = _wrap(x)
        y = self.block(x)
        if self.attention is not None:
            y = self.attention(y)
        if self.skip_mode == "identity":
            y = y + x
        elif self.skip_mode == "project":
            y = y + self.skip_proj(x)
        return y


def watt_stage(x: Tensor, stage: WattStage) -> Tensor:
    return stage(x)
