"""Channel and spatial attention gates and their sequential composition.

Channel gate: sigmoid(W1 relu(W0 avgpool(x)) + W1 relu(W0 maxpool(x))), one
shared bias-free MLP applied to both pooled vectors. Spatial gate: sigmoid of a
7x7 same-padded convolution over the concatenated channel-mean and
channel-max maps. Gates multiply the features by broadcasting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ConfigurationError
from .nn import Module, Parameter, glorot_uniform
from .tensor import Tensor, _wrap, concat


@dataclass
class ChannelAttentionParams:
    omega0: Tensor  # [C/r, C]
    omega1: Tensor  # [C, C/r]

    @property
    def channels(self) -> int:
        return self.omega0.shape[1]

    @property
    def reduction(self) -> int:
        return self.omega0.shape[1] // self.omega0.shape[0]


@dataclass
class SpatialAttentionParams:
    kernel: Tensor  # [1, 2, 7, 7]
    bias: Tensor  # [1]


@dataclass
class AttentionMaps:
    mc: Tensor  # [N, C, 1, 1]
    ms: Tensor  # [N, 1, H, W]


def _shared_mlp(v: Tensor, params: ChannelAttentionParams) -> Tensor:
    return (v @ params.omega0.T).relu() @ params.omega1.T


def channel_attention(phi: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gate in (0, 1), shape [N, C, 1, 1]."""
    phi = _wrap(phi)
    N, C = phi.shape[:2]
    if C != params.channels or params.omega1.shape != (C, params.omega0.shape[0]):
        raise ConfigurationError(
            f"channel attention built for {params.channels} channels "
            f"(omega0 {params.omega0.shape}, omega1 {params.omega1.shape}), input has {C}"
        )
    avg = ops.global_avg_pool(phi).reshape(N, C)
    mx = ops.global_max_pool(phi).reshape(N, C)
    return (_shared_mlp(avg, params) + _shared_mlp(mx, params)).sigmoid().reshape(N, C, 1, 1)


def spatial_attention(phi: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Per-position gate in (0, 1), shape [N, 1, H, W]."""
    phi = _wrap(phi)
    pooled = concat([phi.mean(axis=1, keepdims=True), phi.max(axis=1, keepdims=True)], axis=1)
    return ops.conv2d(pooled, params.kernel, params.bias, stride=1, padding="same").sigmoid()


def attention_maps(phi: Tensor, cparams: ChannelAttentionParams, sparams: SpatialAttentionParams) -> AttentionMaps:
    mc = channel_attention(phi, cparams)
    return AttentionMaps(mc=mc, ms=spatial_attention(phi * mc, sparams))


def apply_attention(phi: Tensor, cparams: ChannelAttentionParams, sparams: SpatialAttentionParams) -> Tensor:
    """Channel gate first, then the spatial gate computed on the re-weighted map."""
    phi = _wrap(phi)
    refined = phi * channel_attention(phi, cparams)
    return refined * spatial_attention(refined, sparams)


class Attention(Module):
    """Trainable channel+spatial attention over ``channels`` feature maps."""

    def __init__(self, channels: int, reduction: int = 8, rng=None, dtype=np.float64):
        super().__init__()
        if reduction < 1 or channels % reduction:
            raise ConfigurationError(f"reduction {reduction} must divide channels {channels}")
        rng = rng or np.random.default_rng(0)
        hidden = channels // reduction
        self.channels, self.reduction = channels, reduction
        self.omega0 = Parameter(glorot_uniform(rng, (hidden, channels), channels, hidden, dtype))
        self.omega1 = Parameter(glorot_uniform(rng, (channels, hidden), hidden, channels, dtype))
        self.spatial_kernel = Parameter(glorot_uniform(rng, (1, 2, 7, 7), 98, 49, dtype))
        self.spatial_bias = Parameter(np.zeros(1, dtype=dtype))

    @property
    def channel_params(self) -> ChannelAttentionParams:
        return ChannelAttentionParams(self.omega0, self.omega1)

    @property
    def spatial_params(self) -> SpatialAttentionParams:
        return SpatialAttentionParams(self.spatial_kernel, self.spatial_bias)

    def forward(self, phi):
        return apply_attention(phi, self.channel_params, self.spatial_params)

    def maps(self, phi) -> AttentionMaps:
        return attention_maps(phi, self.channel_params, self.spatial_params)

    def macs(self, shape) -> int:
        c, h, w = shape
        hidden = c // self.reduction
        mlp = 2 * 2 * c * hidden
        pooling = 2 * c * h * w + 2 * c * h * w  # global avg/max, then channel mean/max
        return mlp + pooling + h * w * 98 + 2 * c * h * w  # conv, then the two gating products
