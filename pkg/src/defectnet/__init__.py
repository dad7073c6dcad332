"""Multi-level, attention-gated two-stage defect detector on a small numpy autodiff core."""

from .detector import CLASSES, Detection, Detector, ModelConfig, detect
from .tensor import Tensor, backward, no_grad
from .trainer import TrainConfig, TrainLog, ablate, train

__all__ = ["CLASSES", "Detection", "Detector", "ModelConfig", "detect", "Tensor", "backward", "no_grad",
           "TrainConfig", "TrainLog", "ablate", "train"]
__version__ = "0.1.0"
