"""Two-stage training, the unified loss, and MAE/RMSE evaluation.

Stage 1 pre-trains the fusion networks and assisted heads on the sum of the
two assisted classification losses and the feature-preservation loss.
Stage 2 starts from a stage-1 checkpoint and optimizes the weighted sum of
the counting MSE and the stage-1 objective.  Every run is deterministic for
a fixed seed: same shuffles, same dropout masks, bitwise-identical history.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .assisted import assisted_loss, binarize_ground_truth
from .datagen import DatasetIndex, density_level, load_pair
from .density import (
    DensityMap,
    count_from_map,
    downsample_density,
    generate_density_map,
)
from .fusion import FusionLossWeights, feature_loss
from .model import FusionCountingModel
from .tensor import ShapeError, Tensor, sgd_step, tensor_mean
from .checkpoint import load_checkpoint, restore_params, save_checkpoint


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-5
    lr_decay_per_epoch: float = 0.995
    batch_size: int = 4
    epochs: int = 200
    lambda_count: float = 10.0
    mu_fusion: float = 1.0
    dropout_rate: float = 0.2
    seed: int = 0
    sigma: float = 4.0            # density ground-truth bandwidth, pixels
    assisted_threshold: float = 1e-3  # binarization level for the assisted target
    visible_weight: float = 0.5
    thermal_weight: float = 0.5
    finetune_fusion: bool = True  # stage 2 keeps updating fusion + assisted heads
    # The feature-preservation term is an unnormalized sum of squares, so
    # early gradients dwarf the parameter scale; a global-norm clip keeps
    # plain SGD stable and is inactive once gradients settle below it.
    grad_clip_norm: float = 50.0

    def __post_init__(self):
        if not 0.0 < self.lr_decay_per_epoch <= 1.0:
            raise ValueError(
                f"lr_decay_per_epoch must be in (0, 1], got {self.lr_decay_per_epoch}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    """Geometric schedule: the rate shrinks by the decay factor each epoch."""
    return config.lr * config.lr_decay_per_epoch ** epoch


@dataclass
class TrainSample:
    """One image pair with every ground-truth tensor precomputed."""

    visible: Tensor
    thermal: Tensor
    n_people: int
    gt_eighth: Tensor   # block-summed density at prediction resolution
    assisted_target: Tensor  # binarized density at the first encoder level's scale
    metadata: dict
    image_id: str = ""


def prepare_samples(index: DatasetIndex, config: TrainConfig) -> list[TrainSample]:
    samples = []
    for entry in index.entries:
        pair = load_pair(entry)
        dm = generate_density_map(pair.dots, sigma=config.sigma)
        gt_eighth = downsample_density(dm, 8).values
        assisted_target = binarize_ground_truth(downsample_density(dm, 2),
                                                config.assisted_threshold)
        samples.append(TrainSample(
            visible=pair.visible, thermal=pair.thermal, n_people=len(pair.dots),
            gt_eighth=gt_eighth, assisted_target=assisted_target,
            metadata=entry.metadata, image_id=pair.image_id))
    return samples


# ---------------------------------------------------------------------------
# Losses


def counting_loss(pred: Tensor, gt: Tensor) -> Tensor:
    """Mean squared error between per-pixel densities."""
    if pred.shape != gt.shape:
        raise ShapeError(f"counting_loss shapes disagree: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    return tensor_mean(diff * diff)


def total_loss(loss_counting: Tensor, loss_fusion: Tensor,
               lambda_count: float, mu_fusion: float) -> Tensor:
    """Weighted sum of the counting and fusion objectives."""
    return lambda_count * loss_counting + mu_fusion * loss_fusion


def stage1_fusion_loss(model: FusionCountingModel, batch: list[TrainSample],
                       weights: FusionLossWeights) -> tuple[Tensor, dict]:
    """Batch-mean of assisted-ir + assisted-vi + feature preservation.

    Each summand is returned separately so the history can log it.
    """
    acc_ir = acc_vi = acc_feat = None
    for sample in batch:
        forward = model.fuse(sample.visible, sample.thermal)
        u_ir = model.assisted_ir(forward.thermal_pyramid.levels[0])
        u_vi = model.assisted_vi(forward.visible_pyramid.levels[0])
        l_ir = assisted_loss(u_ir, sample.assisted_target)
        l_vi = assisted_loss(u_vi, sample.assisted_target)
        l_feat = feature_loss(forward.fused_pyramid, forward.visible_pyramid,
                              forward.thermal_pyramid, weights)
        acc_ir = l_ir if acc_ir is None else acc_ir + l_ir
        acc_vi = l_vi if acc_vi is None else acc_vi + l_vi
        acc_feat = l_feat if acc_feat is None else acc_feat + l_feat
    n = float(len(batch))
    parts = {
        "loss_alm_ir": acc_ir * (1.0 / n),
        "loss_alm_vi": acc_vi * (1.0 / n),
        "loss_feature": acc_feat * (1.0 / n),
    }
    loss = parts["loss_alm_ir"] + parts["loss_alm_vi"] + parts["loss_feature"]
    return loss, parts


def stage2_total_loss(model: FusionCountingModel, batch: list[TrainSample],
                      config: TrainConfig, weights: FusionLossWeights,
                      rng: np.random.Generator | None) -> tuple[Tensor, dict]:
    """Counting MSE plus the stage-1 objective, per the configured weights.

    ``rng`` drives dropout; pass None on evaluation-style forwards.
    """
    acc_count = None
    acc_ir = acc_vi = acc_feat = None
    training = rng is not None
    for sample in batch:
        forward = model.fuse(sample.visible, sample.thermal)
        pred = model.count(forward.fused, training=training, rng=rng)
        l_count = counting_loss(pred, sample.gt_eighth)
        u_ir = model.assisted_ir(forward.thermal_pyramid.levels[0])
        u_vi = model.assisted_vi(forward.visible_pyramid.levels[0])
        l_ir = assisted_loss(u_ir, sample.assisted_target)
        l_vi = assisted_loss(u_vi, sample.assisted_target)
        l_feat = feature_loss(forward.fused_pyramid, forward.visible_pyramid,
                              forward.thermal_pyramid, weights)
        acc_count = l_count if acc_count is None else acc_count + l_count
        acc_ir = l_ir if acc_ir is None else acc_ir + l_ir
        acc_vi = l_vi if acc_vi is None else acc_vi + l_vi
        acc_feat = l_feat if acc_feat is None else acc_feat + l_feat
    n = float(len(batch))
    parts = {
        "loss_counting": acc_count * (1.0 / n),
        "loss_alm_ir": acc_ir * (1.0 / n),
        "loss_alm_vi": acc_vi * (1.0 / n),
        "loss_feature": acc_feat * (1.0 / n),
    }
    loss_fusion = parts["loss_alm_ir"] + parts["loss_alm_vi"] + parts["loss_feature"]
    loss = total_loss(parts["loss_counting"], loss_fusion,
                      config.lambda_count, config.mu_fusion)
    parts["loss_fusion"] = loss_fusion
    return loss, parts


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    model: FusionCountingModel
    history: list[dict]
    config: TrainConfig
    stage: int


def _clip_gradients(params: list[Tensor], max_norm: float | None) -> None:
    if not max_norm:
        return
    total = math.sqrt(sum(float((p.grad * p.grad).sum()) for p in params
                          if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def _trainable_params(model: FusionCountingModel, stage: int,
                      config: TrainConfig) -> list[Tensor]:
    if stage == 1:
        groups = {**model.fusion_params(), **model.assisted_params()}
    elif config.finetune_fusion:
        groups = model.named_params()
    else:
        groups = model.counting_params()
    return [groups[name] for name in sorted(groups)]


def train(config: TrainConfig, index: DatasetIndex, stage: int,
          init_params: dict[str, np.ndarray] | None = None) -> TrainResult:
    """Run one training stage over the indexed dataset.

    Stage 2 refuses to start without stage-1 weights.  Loss history is
    returned as one record per optimizer step.
    """
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    if stage == 2 and init_params is None:
        raise TrainingError("stage 2 requires a stage-1 checkpoint")
    if len(index) == 0:
        raise TrainingError("training dataset is empty")

    model = FusionCountingModel(seed=config.seed, dropout_rate=config.dropout_rate)
    if init_params is not None:
        restore_params(model.named_params(), init_params)

    samples = prepare_samples(index, config)
    weights = FusionLossWeights(visible_weight=config.visible_weight,
                                thermal_weight=config.thermal_weight)
    params = _trainable_params(model, stage, config)
    shuffle_rng = np.random.default_rng((config.seed, stage, 1))
    dropout_rng = np.random.default_rng((config.seed, stage, 2))

    history: list[dict] = []
    for epoch in range(config.epochs):
        lr = lr_at_epoch(config, epoch)
        order = shuffle_rng.permutation(len(samples))
        for step, start in enumerate(range(0, len(samples), config.batch_size)):
            batch = [samples[i] for i in order[start:start + config.batch_size]]
            if stage == 1:
                loss, parts = stage1_fusion_loss(model, batch, weights)
                record_counting = None
            else:
                loss, parts = stage2_total_loss(model, batch, config, weights,
                                                dropout_rng)
                record_counting = parts["loss_counting"].item()
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at stage {stage} epoch {epoch} step {step}")
            loss.backward()
            _clip_gradients(params, config.grad_clip_norm)
            sgd_step(params, lr)
            history.append({
                "stage": stage,
                "epoch": epoch,
                "step": step,
                "loss_total": value,
                "loss_counting": record_counting,
                "loss_feature": parts["loss_feature"].item(),
                "loss_alm_ir": parts["loss_alm_ir"].item(),
                "loss_alm_vi": parts["loss_alm_vi"].item(),
                "lr": lr,
            })
    return TrainResult(model=model, history=history, config=config, stage=stage)


def write_history(path: str | Path, history: list[dict]) -> None:
    with open(path, "w") as fh:
        for record in history:
            fh.write(json.dumps(record) + "\n")


def save_stage(path: str | Path, result: TrainResult) -> None:
    save_checkpoint(path, result.model.named_params(), meta={
        "stage": result.stage,
        "config": result.config.to_dict(),
    })


def load_stage(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SplitMetrics:
    mae: float
    rmse: float
    count: int


@dataclass
class EvalReport:
    """Overall and per-split counting errors.

    RMSE can never drop below MAE (power-mean inequality); construction
    enforces it with a one-ulp slack for the degenerate single-image split.
    """

    mae: float
    rmse: float
    splits: dict[str, SplitMetrics]
    per_image: list[dict] = field(default_factory=list)

    def __post_init__(self):
        checks = [("overall", self.mae, self.rmse)]
        checks += [(name, m.mae, m.rmse) for name, m in self.splits.items()]
        for name, mae, rmse in checks:
            if not (rmse >= mae * (1.0 - 1e-12) and mae >= 0.0):
                raise ValueError(
                    f"split '{name}' violates rmse >= mae >= 0: "
                    f"mae={mae}, rmse={rmse}")

    def to_dict(self) -> dict:
        return {
            "mae": self.mae,
            "rmse": self.rmse,
            "splits": {name: {"mae": m.mae, "rmse": m.rmse, "count": m.count}
                       for name, m in sorted(self.splits.items())},
            "n_images": len(self.per_image),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _metrics(errors: list[float]) -> tuple[float, float]:
    n = len(errors)
    mae = math.fsum(abs(e) for e in errors) / n
    rmse = math.sqrt(math.fsum(e * e for e in errors) / n)
    return mae, rmse


def evaluate(model: FusionCountingModel, index: DatasetIndex) -> EvalReport:
    """Counting error of the model over an annotated dataset split."""
    if len(index) == 0:
        raise ValueError("evaluation dataset is empty")
    per_image = []
    for entry in index.entries:
        pair = load_pair(entry)
        _, pred = model.infer(pair.visible, pair.thermal)
        estimated = float(pred.data.sum())
        truth = float(len(pair.dots))
        tags = [entry.metadata.get("illumination"),
                entry.metadata.get("density_level") or density_level(len(pair.dots))]
        per_image.append({
            "image_id": pair.image_id,
            "truth": truth,
            "estimate": estimated,
            "tags": [t for t in tags if t],
        })

    errors = [img["estimate"] - img["truth"] for img in per_image]
    mae, rmse = _metrics(errors)
    splits = {}
    tag_names = sorted({t for img in per_image for t in img["tags"]})
    for tag in tag_names:
        tagged = [img["estimate"] - img["truth"] for img in per_image if tag in img["tags"]]
        s_mae, s_rmse = _metrics(tagged)
        splits[tag] = SplitMetrics(mae=s_mae, rmse=s_rmse, count=len(tagged))
    return EvalReport(mae=mae, rmse=rmse, splits=splits, per_image=per_image)


def train_mae(model: FusionCountingModel, samples: list[TrainSample]) -> float:
    """Mean absolute counting error over prepared samples (no dropout)."""
    errors = []
    for sample in samples:
        _, pred = model.infer(sample.visible, sample.thermal)
        errors.append(abs(float(pred.data.sum()) - float(sample.n_people)))
    return math.fsum(errors) / len(errors)
