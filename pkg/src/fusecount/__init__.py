"""RGB-thermal fusion, density-map crowd counting, and dense-area alerting."""

from .tensor import ConvSpec, ShapeError, Tensor, conv2d, matmul, sgd_step, softmax, upsample_nearest
from .density import DensityMap, DotAnnotations, count_from_map, downsample_density, generate_density_map
from .fusion import FeaturePyramid, FusionLossWeights, feature_loss
from .assisted import assisted_loss, binarize_ground_truth
from .model import FusionCountingModel
from .supervisor import AlertMessage, CandidateBox, decide_alert, enumerate_boxes, find_pmax, supervise
from .training import EvalReport, TrainConfig, counting_loss, evaluate, train
from .datagen import ImagePair, SceneSpec, generate_scene, load_dataset

__all__ = [
    "AlertMessage",
    "CandidateBox",
    "ConvSpec",
    "DensityMap",
    "DotAnnotations",
    "EvalReport",
    "FeaturePyramid",
    "FusionCountingModel",
    "FusionLossWeights",
    "ImagePair",
    "SceneSpec",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "assisted_loss",
    "binarize_ground_truth",
    "conv2d",
    "count_from_map",
    "counting_loss",
    "decide_alert",
    "downsample_density",
    "enumerate_boxes",
    "evaluate",
    "feature_loss",
    "find_pmax",
    "generate_density_map",
    "generate_scene",
    "load_dataset",
    "matmul",
    "sgd_step",
    "softmax",
    "supervise",
    "train",
    "upsample_nearest",
]
