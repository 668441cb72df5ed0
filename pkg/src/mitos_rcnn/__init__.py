"""Cascade region-proposal detector for mitotic figures, built on a small numpy autodiff core."""
from .boxes import Box, BoxDelta, apply_delta, encode_delta, iou, nms
from .detection import DetectorConfig, MitosRCNN, detect, multitask_loss
from .evaluation import ConfusionCounts, MatchCriterion, centroid_match, metrics, proliferation_grade
from .records import BoxAnnotation, ClassId, Detection
from .tensor import GradTape, Tensor

__version__ = "0.1.0"

__all__ = [
    "Box", "BoxDelta", "apply_delta", "encode_delta", "iou", "nms",
    "DetectorConfig", "MitosRCNN", "detect", "multitask_loss",
    "ConfusionCounts", "MatchCriterion", "centroid_match", "metrics", "proliferation_grade",
    "BoxAnnotation", "ClassId", "Detection",
    "GradTape", "Tensor",
]
