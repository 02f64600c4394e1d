"""Dual-encoder image fusion: per-scale residual fusion and a top-down
decoder.

A visible and a thermal image are encoded into 4-level feature pyramids,
fused level by level (each level has its own fusion block, with a residual
connection from the thermal stream, which carries the salient targets), and
decoded top-down into a single fused image.  The feature-preservation loss
constrains fused features to stay close to a weighted sum of the two source
pyramids, with per-level weights [1, 10, 100, 1000].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, collect_params
from .tensor import ShapeError, Tensor, concat, tensor_sum, upsample_nearest

PYRAMID_LEVELS = 4
LEVEL_LOSS_WEIGHTS = (1.0, 10.0, 100.0, 1000.0)
DEFAULT_CHANNELS = (16, 32, 48, 64)


@dataclass
class FeaturePyramid:
    """Four multi-scale feature tensors, each level half the previous size."""

    levels: list[Tensor]

    def __post_init__(self):
        if len(self.levels) != PYRAMID_LEVELS:
            raise ShapeError(f"pyramid must have {PYRAMID_LEVELS} levels, got {len(self.levels)}")
        for m in range(1, PYRAMID_LEVELS):
            ph, pw = self.levels[m - 1].shape[1:]
            h, w = self.levels[m].shape[1:]
            if (h, w) != (ph // 2, pw // 2):
                raise ShapeError(
                    f"pyramid level {m} has size {h}x{w}, expected "
                    f"{ph // 2}x{pw // 2}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(level.shape[0] for level in self.levels)

    def compatible_with(self, other: "FeaturePyramid") -> bool:
        return all(a.shape == b.shape for a, b in zip(self.levels, other.levels))


@dataclass
class FusionLossWeights:
    """Trade-off weights of the feature-preservation loss."""

    level_weights: tuple[float, ...] = LEVEL_LOSS_WEIGHTS
    visible_weight: float = 0.5
    thermal_weight: float = 0.5

    def __post_init__(self):
        if tuple(self.level_weights) != LEVEL_LOSS_WEIGHTS:
            raise ValueError(
                f"level_weights must be {LEVEL_LOSS_WEIGHTS}, got {self.level_weights}")
        if self.visible_weight <= 0 or self.thermal_weight <= 0:
            raise ValueError("visible_weight and thermal_weight must be positive")


class Encoder:
    """Four stride-2 conv stages producing a feature pyramid from one image."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: tuple[int, ...] = DEFAULT_CHANNELS, in_channels: int = 1):
        self.name = name
        self.channels = tuple(channels)
        self.blocks = []
        prev = in_channels
        for m, ch in enumerate(self.channels, start=1):
            down = Conv2d(f"{name}.level{m}.down", prev, ch, kernel=3, stride=2,
                          padding=1, relu=True, rng=rng)
            refine = Conv2d(f"{name}.level{m}.refine", ch, ch, kernel=3, stride=1,
                            padding=1, relu=True, rng=rng)
            self.blocks.append((down, refine))
            prev = ch

    def __call__(self, image: Tensor) -> FeaturePyramid:
        _, h, w = image.shape
        if h % 16 or w % 16:
            raise ShapeError(f"encoder input size {h}x{w} must be divisible by 16")
        levels = []
        x = image
        for down, refine in self.blocks:
            x = refine(down(x))
            levels.append(x)
        return FeaturePyramid(levels=levels)

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(*(layer for pair in self.blocks for layer in pair))


class FusionBlock:
    """One per-level fusion block: conv stack on the concatenated streams
    plus a residual connection from the thermal stream."""

    def __init__(self, name: str, channels: int, rng: np.random.Generator | None):
        self.name = name
        self.conv1 = Conv2d(f"{name}.conv1", 2 * channels, channels, relu=True, rng=rng)
        self.conv2 = Conv2d(f"{name}.conv2", channels, channels, relu=True, rng=rng)
        self.conv3 = Conv2d(f"{name}.conv3", channels, channels, relu=False, rng=rng)

    def __call__(self, visible: Tensor, thermal: Tensor) -> Tensor:
        if visible.shape != thermal.shape:
            raise ShapeError(
                f"fusion block inputs disagree: {visible.shape} vs {thermal.shape}")
        h = self.conv1(concat([visible, thermal], axis=0))
        h = self.conv3(self.conv2(h))
        return h + thermal

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(self.conv1, self.conv2, self.conv3)


class PyramidFusion:
    """Four fusion blocks sharing an architecture but not weights."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: tuple[int, ...] = DEFAULT_CHANNELS):
        self.blocks = [FusionBlock(f"{name}.level{m + 1}", ch, rng)
                       for m, ch in enumerate(channels)]

    def __call__(self, visible: FeaturePyramid, thermal: FeaturePyramid) -> FeaturePyramid:
        if not visible.compatible_with(thermal):
            raise ShapeError("fusion inputs are not level-compatible pyramids")
        fused = [block(a, b) for block, a, b in
                 zip(self.blocks, visible.levels, thermal.levels)]
        return FeaturePyramid(levels=fused)

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(*self.blocks)


class TopDownDecoder:
    """Upsample the deepest level, concat with each skip level, refine;
    produces the fused image at full input resolution."""

    def __init__(self, name: str, rng: np.random.Generator | None,
                 channels: tuple[int, ...] = DEFAULT_CHANNELS):
        self.channels = tuple(channels)
        self.merges = []
        upper = self.channels[-1]
        for m in range(len(self.channels) - 2, -1, -1):  # levels 3, 2, 1
            skip = self.channels[m]
            conv1 = Conv2d(f"{name}.merge{m + 1}.conv1", upper + skip, skip,
                           relu=True, rng=rng)
            conv2 = Conv2d(f"{name}.merge{m + 1}.conv2", skip, skip,
                           relu=True, rng=rng)
            self.merges.append((conv1, conv2))
            upper = skip
        self.out_conv = Conv2d(f"{name}.out", self.channels[0], 1, kernel=1,
                               padding=0, relu=False, rng=rng)

    def __call__(self, pyramid: FeaturePyramid) -> Tensor:
        x = pyramid.levels[-1]
        for (conv1, conv2), skip in zip(self.merges, reversed(pyramid.levels[:-1])):
            x = upsample_nearest(x, 2)
            x = conv2(conv1(concat([x, skip], axis=0)))
        return self.out_conv(upsample_nearest(x, 2))

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(*(layer for pair in self.merges for layer in pair),
                              self.out_conv)


def feature_loss(fused: FeaturePyramid, visible: FeaturePyramid,
                 thermal: FeaturePyramid, weights: FusionLossWeights) -> Tensor:
    """Weighted squared Frobenius distance between the fused pyramid and the
    weighted sum of the source pyramids, summed over the four levels."""
    if not (fused.compatible_with(visible) and fused.compatible_with(thermal)):
        raise ShapeError("feature_loss pyramids are not level-compatible")
    total = None
    for m in range(PYRAMID_LEVELS):
        target = (weights.visible_weight * visible.levels[m]
                  + weights.thermal_weight * thermal.levels[m])
        diff = fused.levels[m] - target
        term = weights.level_weights[m] * tensor_sum(diff * diff)
        total = term if total is None else total + term
    return total
