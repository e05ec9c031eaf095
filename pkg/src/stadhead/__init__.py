"""Anchor-free detection-head mathematics: assignment, losses, decoding and evaluation."""

from .assign import SIMOTA, TAL, AssignConfig, Assignment, GroundTruth, assign
from .evalmap import EvalResult, evaluate
from .geom import BoxXYXY, ciou, iou
from .loss import LossHyper, LossReport, detection_loss, simota_loss, tal_loss
from .postprocess import Detection, nms, postprocess
from .pyramid import AnchorGrid, PredictionSet, build_grid

__version__ = "0.1.0"

__all__ = [
    "SIMOTA", "TAL", "AssignConfig", "Assignment", "GroundTruth", "assign",
    "EvalResult", "evaluate", "BoxXYXY", "ciou", "iou",
    "LossHyper", "LossReport", "detection_loss", "simota_loss", "tal_loss",
    "Detection", "nms", "postprocess", "AnchorGrid", "PredictionSet", "build_grid",
]
