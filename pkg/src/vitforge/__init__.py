"""vitforge: a from-scratch Vision Transformer image-classification stack.

Subpackages:
  tensor      n-d tensors with reverse-mode autodiff
  data        dataset loading, splitting, augmentation, synthetic generation
  model       the Vision Transformer classifier
  train       Adam optimizer, training loop, early stopping, evaluation
  metrics     confusion matrices and precision/recall/F1 reports
  estimator   sklearn-style fit/predict wrapper around the whole pipeline
  checkpoint  binary VITF checkpoint persistence
  config      run configuration and the key=value config-file format
  cli         the ``vitforge`` command-line interface
"""

__version__ = "0.1.0"

from .config import RunConfig
from .data import AugmentSpec, ClassMap, Dataset, LabeledImage, SplitSpec
from .estimator import VitClassifier
from .metrics import ConfusionMatrix, Report
from .model import ViTConfig
from .tensor import GradTape, ShapeError, Tensor
from .train import EpochRecord, TrainConfig

__all__ = [
    "Tensor",
    "GradTape",
    "ShapeError",
    "ViTConfig",
    "TrainConfig",
    "SplitSpec",
    "AugmentSpec",
    "ClassMap",
    "Dataset",
    "LabeledImage",
    "ConfusionMatrix",
    "Report",
    "EpochRecord",
    "RunConfig",
    "VitClassifier",
    "__version__",
]
