"""Two-stage multi-modal transformer for multiple-instance classification
over per-modality feature bags, with training, ablation, and
explainability tooling."""

from .autodiff import Tensor, backward, no_grad
from .data import FeatureBag, SampleRecord, SyntheticSpec
from .model import ModelConfig, UnicornModel, predict
from .training import TrainConfig, train

__all__ = [
    "Tensor",
    "backward",
    "no_grad",
    "FeatureBag",
    "SampleRecord",
    "SyntheticSpec",
    "ModelConfig",
    "UnicornModel",
    "predict",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
