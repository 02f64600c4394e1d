"""Layer and parameter plumbing shared by the fusion and counting networks."""

from __future__ import annotations

import numpy as np

from .tensor import ConvSpec, Tensor, conv2d


def he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Conv2d:
    """Conv layer owning its weight/bias tensors, named with dotted paths."""

    def __init__(self, name: str, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 1, dilation: int = 1, padding: int = 1,
                 relu: bool = False, rng: np.random.Generator | None = None):
        self.name = name
        self.spec = ConvSpec(in_channels=in_ch, out_channels=out_ch,
                             kernel=(kernel, kernel), stride=stride,
                             dilation=dilation, padding=padding, has_relu=relu)
        fan_in = in_ch * kernel * kernel
        if rng is None:
            weight = np.zeros((out_ch, in_ch, kernel, kernel))
        else:
            weight = he_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in)
        self.weight = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True, name=f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.spec)

    def named_params(self) -> dict[str, Tensor]:
        return {self.weight.name: self.weight, self.bias.name: self.bias}


def scalar_param(name: str, value: float = 0.0) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)


def collect_params(*parts) -> dict[str, Tensor]:
    """Merge ``named_params()`` dicts, rejecting duplicate names."""
    merged: dict[str, Tensor] = {}
    for part in parts:
        params = part.named_params() if hasattr(part, "named_params") else part
        for key, value in params.items():
            if key in merged:
                raise ValueError(f"duplicate parameter name: {key}")
            merged[key] = value
    return merged
