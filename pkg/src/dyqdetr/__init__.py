"""Dynamic-query incremental object detection on synthetic shape scenes."""
from .diffcore import Tensor, backward, no_grad
from .model import DyQDETR, ModelConfig
from .increngine import PhasePlan
from .evaluation import EvalReport, evaluate

__all__ = ["Tensor", "backward", "no_grad", "DyQDETR", "ModelConfig", "PhasePlan", "EvalReport", "evaluate"]
__version__ = "0.1.0"
