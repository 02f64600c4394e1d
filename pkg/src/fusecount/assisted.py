"""Assisted learning head: turns encoder features into a head/background
classification trained against the binarized density ground truth.

Only the training path ever runs this; inference never touches it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .density import DensityMap
from .nn import Conv2d, collect_params
from .tensor import ShapeError, Tensor, clip, log, sigmoid, tensor_mean

# Probabilities are clamped away from {0, 1} before the logs; removes any NaN
# risk at no practical bias.
PROB_EPS = 1e-7
DEFAULT_BINARIZE_THRESHOLD = 1e-3


@dataclass
class AssistedOutput:
    u: Tensor  # predicted head probability, strictly inside (0, 1)
    k: Tensor  # binary ground truth


class AssistedHead:
    """conv 3x3 (in -> 8) + ReLU, conv 3x3 (8 -> 1), sigmoid.

    Head pixels are a small minority of each map, so the random init biases
    the final layer toward the background class; training starts near the
    base rate instead of at coin-flip confidence.
    """

    SPARSE_PRIOR_BIAS = -2.0

    def __init__(self, name: str, rng: np.random.Generator | None,
                 in_channels: int = 64, mid_channels: int = 8):
        self.in_channels = in_channels
        self.conv1 = Conv2d(f"{name}.conv1", in_channels, mid_channels,
                            relu=True, rng=rng)
        self.conv2 = Conv2d(f"{name}.conv2", mid_channels, 1, relu=False, rng=rng)
        if rng is not None:
            self.conv2.bias.data[:] = self.SPARSE_PRIOR_BIAS

    def __call__(self, feature: Tensor) -> Tensor:
        if feature.shape[0] != self.in_channels:
            raise ShapeError(
                f"assisted head expects {self.in_channels} channels, "
                f"got {feature.shape[0]}")
        return sigmoid(self.conv2(self.conv1(feature)))

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(self.conv1, self.conv2)


def assisted_loss(u: Tensor, k: Tensor) -> Tensor:
    """Binary cross-entropy between prediction u and binary target k,
    averaged over the pixels of the map."""
    if u.shape != k.shape:
        raise ShapeError(f"assisted_loss shapes disagree: {u.shape} vs {k.shape}")
    uc = clip(u, PROB_EPS, 1.0 - PROB_EPS)
    return -tensor_mean(k * log(uc) + (1.0 - k) * log(1.0 - uc))


def binarize_ground_truth(density: DensityMap,
                          threshold: float = DEFAULT_BINARIZE_THRESHOLD) -> Tensor:
    """k = 1 where density exceeds the threshold, else 0."""
    if threshold < 0:
        raise ValueError(f"threshold must be >= 0, got {threshold}")
    return Tensor((density.values.data > threshold).astype(np.float64))
