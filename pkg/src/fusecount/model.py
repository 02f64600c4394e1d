"""The full pipeline model: fusion networks, assisted heads, and the
counting network, with the forward paths the trainer and CLI use.

The fused-feature pyramid used by the feature-preservation loss is obtained
by re-encoding the decoded fused image with the thermal encoder, so the loss
closes the encode -> fuse -> decode round-trip and every fusion parameter,
decoder included, sits on the gradient path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .assisted import AssistedHead
from .counting import Backbone, DilatedContextBlock, DualAttentionBlock, PredictHead
from .fusion import DEFAULT_CHANNELS, Encoder, FeaturePyramid, PyramidFusion, TopDownDecoder
from .nn import collect_params
from .tensor import Tensor, dropout, upsample_nearest


@dataclass
class FusionForward:
    visible_pyramid: FeaturePyramid
    thermal_pyramid: FeaturePyramid
    fused: Tensor                  # decoded fused image, full resolution
    fused_pyramid: FeaturePyramid  # fused image re-encoded (round-trip features)


class FusionCountingModel:
    """All networks of the pipeline under one parameter namespace."""

    def __init__(self, seed: int = 0, channels: tuple[int, ...] = DEFAULT_CHANNELS,
                 dropout_rate: float = 0.2):
        rng = np.random.default_rng(seed)
        self.channels = tuple(channels)
        self.dropout_rate = dropout_rate
        self.encoder_vi = Encoder("encoder_vi", rng, channels)
        self.encoder_ir = Encoder("encoder_ir", rng, channels)
        self.fusion = PyramidFusion("fusion", rng, channels)
        self.decoder = TopDownDecoder("decoder", rng, channels)
        self.assisted_vi = AssistedHead("assisted_vi", rng, in_channels=channels[0])
        self.assisted_ir = AssistedHead("assisted_ir", rng, in_channels=channels[0])
        self.backbone = Backbone("backbone", rng)
        self.context = DilatedContextBlock("context", rng)
        self.attention = DualAttentionBlock("attention", rng)
        self.head = PredictHead("head", rng)

    # Parameter groups -----------------------------------------------------
    def fusion_params(self) -> dict[str, Tensor]:
        return collect_params(self.encoder_vi, self.encoder_ir, self.fusion,
                              self.decoder)

    def assisted_params(self) -> dict[str, Tensor]:
        return collect_params(self.assisted_vi, self.assisted_ir)

    def counting_params(self) -> dict[str, Tensor]:
        return collect_params(self.backbone, self.context, self.attention, self.head)

    def named_params(self) -> dict[str, Tensor]:
        return collect_params(self.fusion_params(), self.assisted_params(),
                              self.counting_params())

    # Forward paths ---------------------------------------------------------
    def fuse(self, visible: Tensor, thermal: Tensor) -> FusionForward:
        visible_pyramid = self.encoder_vi(visible)
        thermal_pyramid = self.encoder_ir(thermal)
        fused = self.decoder(self.fusion(visible_pyramid, thermal_pyramid))
        fused_pyramid = self.encoder_ir(fused)
        return FusionForward(visible_pyramid=visible_pyramid,
                             thermal_pyramid=thermal_pyramid,
                             fused=fused, fused_pyramid=fused_pyramid)

    def count(self, fused: Tensor, training: bool = False,
              rng: np.random.Generator | None = None) -> Tensor:
        features = self.backbone(fused)
        context = self.context(features)
        if training and self.dropout_rate > 0:
            if rng is None:
                raise ValueError("training-mode count() needs an rng for dropout")
            context = dropout(context, self.dropout_rate, rng)
        attended = self.attention(context)
        return self.head(attended)

    def infer(self, visible: Tensor, thermal: Tensor) -> tuple[Tensor, Tensor]:
        """Validation path: fused image and 1/8-scale density prediction.
        The assisted heads are never invoked here."""
        visible_pyramid = self.encoder_vi(visible)
        thermal_pyramid = self.encoder_ir(thermal)
        fused = self.decoder(self.fusion(visible_pyramid, thermal_pyramid))
        return fused, self.count(fused, training=False)

    def predict_full_resolution(self, density_eighth: Tensor) -> Tensor:
        """Nearest-neighbor blow-up for visualization and alerting; the
        count lives in the values, so the sum is rescaled to stay put."""
        up = upsample_nearest(density_eighth, 8)
        return up * (1.0 / 64.0)
