"""Motion-aided box-supervised instance segmentation on synthetic moving shapes."""

from .autodiff import Graph, Tensor, grad_check
from .config import Config, load_config
from .model import FusionSpec, ModelConfig, MotionSegModel
from .pairwise import SupervisionParams, enumerate_pairs
from .synthdata import SceneConfig, generate_sample, generate_split
from .training import RunConfig, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "Config",
    "FusionSpec",
    "Graph",
    "ModelConfig",
    "MotionSegModel",
    "RunConfig",
    "SceneConfig",
    "SupervisionParams",
    "Tensor",
    "TrainConfig",
    "enumerate_pairs",
    "evaluate",
    "generate_sample",
    "generate_split",
    "grad_check",
    "load_config",
    "train",
]
