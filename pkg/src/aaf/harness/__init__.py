"""Desk-scale few-shot detection harness built on the AAF pipeline."""

from .data import (
    CLASS_NAMES,
    DEFAULT_SPLIT,
    BoundingBox,
    ClassSplit,
    Episode,
    NovelRegistry,
    SceneLayout,
    SyntheticScene,
    crop_resize,
    generate_scene,
    sample_episode,
)
from .loss import Targets, build_targets, compute_loss
from .metrics import average_precision, compute_iou, iou_matrix, match_detections, nms
from .model import Backbone, Detector, Head, Predictions, cell_grid, head_forward
from .training import (
    PROTOCOLS,
    SHOTS_GRID,
    TREND_SCHEDULE,
    DivergenceError,
    EvalReport,
    Schedule,
    evaluate,
    finetune,
    register_novel,
    train,
    train_base,
)

__all__ = [
    "CLASS_NAMES",
    "DEFAULT_SPLIT",
    "BoundingBox",
    "ClassSplit",
    "Episode",
    "NovelRegistry",
    "SceneLayout",
    "SyntheticScene",
    "crop_resize",
    "generate_scene",
    "sample_episode",
    "Targets",
    "build_targets",
    "compute_loss",
    "average_precision",
    "compute_iou",
    "iou_matrix",
    "match_detections",
    "nms",
    "Backbone",
    "Detector",
    "Head",
    "Predictions",
    "cell_grid",
    "head_forward",
    "PROTOCOLS",
    "SHOTS_GRID",
    "TREND_SCHEDULE",
    "DivergenceError",
    "EvalReport",
    "Schedule",
    "evaluate",
    "finetune",
    "register_novel",
    "train",
    "train_base",
]
