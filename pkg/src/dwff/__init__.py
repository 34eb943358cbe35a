"""Dynamic-weighted multi-level feature fusion decoder lab."""

from .decoder import DecoderConfig, DecoderParams, FusionMode, forward
from .features import CLASSES, FeatureStack, SurrogateBackbone, generate_scene, split_dataset
from .losses import LossBreakdown, LossConfig, total_loss
from .metrics import ConfusionMatrix, class_metrics, mean_metrics
from .tensor import GradTape, Tensor, grad_check

__version__ = "0.1.0"
