"""Crowd-counting network: reduced backbone to 1/8-scale 64-channel features,
a densely connected dilated-convolution context block, dual spatial/channel
attention with learnable output scales, and a 1x1 density head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, collect_params, scalar_param
from .tensor import (
    ShapeError,
    Tensor,
    concat,
    matmul,
    relu,
    reshape,
    softmax,
    transpose2d,
)

DILATION_RATES = (3, 6, 12, 18, 24)
BACKBONE_CHANNELS = (16, 32, 64)
FEATURE_CHANNELS = 64


@dataclass
class ContextBlockConfig:
    """Dilated dense block geometry; padding equals the rate at every layer
    so spatial size never changes."""

    rates: tuple[int, ...] = DILATION_RATES
    channels: int = FEATURE_CHANNELS

    def __post_init__(self):
        if tuple(self.rates) != DILATION_RATES:
            raise ValueError(f"rates must be {DILATION_RATES}, got {self.rates}")


class Backbone:
    """Three stride-2 conv stages then a dilation-2 stage: [1,H,W] ->
    [64, H/8, W/8]."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: tuple[int, ...] = BACKBONE_CHANNELS, in_channels: int = 1):
        c1, c2, c3 = channels
        self.stages = [
            Conv2d(f"{name}.stage1", in_channels, c1, stride=2, padding=1, relu=True, rng=rng),
            Conv2d(f"{name}.stage2", c1, c2, stride=2, padding=1, relu=True, rng=rng),
            Conv2d(f"{name}.stage3", c2, c3, stride=2, padding=1, relu=True, rng=rng),
            Conv2d(f"{name}.stage4", c3, c3, stride=1, dilation=2, padding=2,
                   relu=True, rng=rng),
        ]
        self.out_channels = c3

    def __call__(self, image: Tensor) -> Tensor:
        _, h, w = image.shape
        if h % 8 or w % 8:
            raise ShapeError(f"backbone input size {h}x{w} must be divisible by 8")
        x = image
        for stage in self.stages:
            x = stage(x)
        return x

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(*self.stages)


class DilatedContextBlock:
    """Densely connected dilated stack.

    Layer i consumes the channel-concatenation of the block input and every
    earlier layer's output, so input widths grow 64, 128, ..., 320; a final
    1x1 conv maps the full concatenation back to 64 channels.
    """

    def __init__(self, name: str, rng: np.random.Generator | None,
                 config: ContextBlockConfig | None = None):
        self.config = config or ContextBlockConfig()
        ch = self.config.channels
        self.layers = []
        for i, rate in enumerate(self.config.rates):
            in_ch = ch * (i + 1)
            self.layers.append(Conv2d(f"{name}.dilated{i + 1}", in_ch, ch,
                                      dilation=rate, padding=rate, relu=True, rng=rng))
        fuse_in = ch * (len(self.config.rates) + 1)
        self.fuse = Conv2d(f"{name}.fuse", fuse_in, ch, kernel=1, padding=0,
                           relu=False, rng=rng)

    def __call__(self, features: Tensor) -> Tensor:
        if features.shape[0] != self.config.channels:
            raise ShapeError(
                f"context block expects {self.config.channels} channels, "
                f"got {features.shape[0]}")
        collected = [features]
        for layer in self.layers:
            stacked = collected[0] if len(collected) == 1 else concat(collected, axis=0)
            collected.append(layer(stacked))
        return self.fuse(concat(collected, axis=0))

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(*self.layers, self.fuse)


class DualAttentionParams:
    """1x1 embeddings for the spatial branch plus the two learnable output
    scales, both initialized to zero so training starts at the residual
    identity."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: int = FEATURE_CHANNELS):
        self.channels = channels
        embed = max(1, channels // 8)
        self.embed_channels = embed
        self.w_theta = Conv2d(f"{name}.theta", channels, embed, kernel=1,
                              padding=0, relu=False, rng=rng)
        self.w_phi = Conv2d(f"{name}.phi", channels, embed, kernel=1,
                            padding=0, relu=False, rng=rng)
        self.w_g = Conv2d(f"{name}.g", channels, channels, kernel=1,
                          padding=0, relu=False, rng=rng)
        self.spatial_scale = scalar_param(f"{name}.spatial_scale", 0.0)
        self.channel_scale = scalar_param(f"{name}.channel_scale", 0.0)

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(self.w_theta, self.w_phi, self.w_g,
                              {self.spatial_scale.name: self.spatial_scale,
                               self.channel_scale.name: self.channel_scale})


def _flatten_spatial(x: Tensor) -> Tensor:
    c, h, w = x.shape
    return reshape(x, (c, h * w))


def spatial_attention_map(features: Tensor, params: DualAttentionParams) -> Tensor:
    """Row-stochastic [HW, HW] attention from embedded-feature affinities."""
    queries = _flatten_spatial(params.w_theta(features))  # column j = theta(x_j)
    keys = _flatten_spatial(params.w_phi(features))       # column i = phi(x_i)
    affinity = matmul(transpose2d(queries), keys)         # row j, column i
    return softmax(affinity, axis=1)


def spatial_attention(features: Tensor, params: DualAttentionParams) -> Tensor:
    """Attention-weighted values scaled by the learnable factor, plus the
    input (residual)."""
    c, h, w = features.shape
    attention = spatial_attention_map(features, params)
    values = _flatten_spatial(params.w_g(features))       # [C, HW]
    mixed = matmul(values, transpose2d(attention))        # out[:, j] = sum_i a[j,i] v[:,i]
    return params.spatial_scale * reshape(mixed, (c, h, w)) + features


def channel_attention_map(features: Tensor) -> Tensor:
    """Row-stochastic [C, C] attention from raw-feature affinities; the
    channel branch uses no learned embeddings."""
    flat = _flatten_spatial(features)                     # [C, HW]
    affinity = matmul(flat, transpose2d(flat))            # [C, C]
    return softmax(affinity, axis=1)


def channel_attention(features: Tensor, params: DualAttentionParams) -> Tensor:
    """Channel-mixed features scaled by the learnable factor, plus the
    input (residual)."""
    c, h, w = features.shape
    attention = channel_attention_map(features)
    flat = _flatten_spatial(features)
    mixed = matmul(attention, flat)                       # out[j,:] = sum_i a[j,i] f[i,:]
    return params.channel_scale * reshape(mixed, (c, h, w)) + features


class DualAttentionBlock:
    """Spatial plus channel attention branches integrated by a 1x1
    convolution; output keeps the input shape."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: int = FEATURE_CHANNELS):
        self.params = DualAttentionParams(name, rng, channels)
        self.out_conv = Conv2d(f"{name}.out", channels, channels, kernel=1,
                               padding=0, relu=False, rng=rng)

    def __call__(self, features: Tensor) -> Tensor:
        branches = (spatial_attention(features, self.params)
                    + channel_attention(features, self.params))
        return self.out_conv(branches)

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(self.params, self.out_conv)


class PredictHead:
    """1x1 conv to one channel, clamped non-negative."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 in_channels: int = FEATURE_CHANNELS):
        self.conv = Conv2d(f"{name}.conv", in_channels, 1, kernel=1, padding=0,
                           relu=False, rng=rng)

    def __call__(self, features: Tensor) -> Tensor:
        return relu(self.conv(features))

    def named_params(self) -> dict[str, Tensor]:
        return self.conv.named_params()
