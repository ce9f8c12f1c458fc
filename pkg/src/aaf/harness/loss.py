"""Focal classification + IoU regression loss over per-cell predictions."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .. import ops
from ..tensor import Tensor
from .data import SyntheticScene
from .model import Predictions

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class Targets:
    labels: np.ndarray  # (B, C, M) in {0, 1}
    offsets: np.ndarray  # (B, C, M, 4) l, t, r, b in pixels; 1 on negatives

    @property
    def positives(self) -> np.ndarray:
        return self.labels > 0

    @property
    def num_positive(self) -> int:
        return int(self.labels.sum())


def build_targets(scenes: Sequence[SyntheticScene], classes: Sequence[int], cells: np.ndarray) -> Targets:
    """A cell is positive for class c when its centre lies inside a box of class c.

    When several boxes contain the centre, the smallest one sets the offsets.
    """
    b, c, m = len(scenes), len(classes), len(cells)
    labels = np.zeros((b, c, m))
    offsets = np.ones((b, c, m, 4))
    cx, cy = cells[:, 0], cells[:, 1]
    for i, scene in enumerate(scenes):
        for j, cls in enumerate(classes):
            best_area = np.full(m, np.inf)
            for box in scene.boxes_of(cls):
                inside = (cx > box.x_min) & (cx < box.x_max) & (cy > box.y_min) & (cy < box.y_max)
                take = inside & (box.area < best_area)
                if not take.any():
                    continue
                best_area[take] = box.area
                labels[i, j, take] = 1.0
                offsets[i, j, take] = np.stack(
                    [cx[take] - box.x_min, cy[take] - box.y_min, box.x_max - cx[take], box.y_max - cy[take]],
                    axis=1,
                )
    return Targets(labels, offsets)


def iou_loss_terms(log_offsets: Tensor, strides: np.ndarray, target: np.ndarray) -> Tensor:
    """Per-cell ``-log IoU`` between predicted and target l/t/r/b offsets."""
    pred = ops.mul(ops.exp(log_offsets), Tensor(strides[:, None]))
    l, t, r, b = ops.split_channels(pred, [1, 1, 1, 1])
    tgt = [Tensor(target[..., i:i + 1]) for i in range(4)]
    iw = ops.add(ops.minimum(l, tgt[0]), ops.minimum(r, tgt[2]))
    ih = ops.add(ops.minimum(t, tgt[1]), ops.minimum(b, tgt[3]))
    inter = ops.mul(iw, ih)
    area_p = ops.mul(ops.add(l, r), ops.add(t, b))
    area_t = Tensor((target[..., 0:1] + target[..., 2:3]) * (target[..., 1:2] + target[..., 3:4]))
    union = ops.sub(ops.add(area_p, area_t), inter)
    iou = ops.div(inter, union)
    return ops.scale(ops.log(iou), -1.0)


def compute_loss(preds: Predictions, targets: Targets) -> Tensor:
    """Focal loss on all cells plus IoU loss on positives, normalised by the positive count.

    Without positives only the classification term remains (normalised by 1).
    """
    cls = ops.sigmoid_focal_loss(preds.logits, targets.labels, FOCAL_ALPHA, FOCAL_GAMMA)
    npos = targets.num_positive
    if npos == 0:
        return cls
    reg = iou_loss_terms(preds.log_offsets, preds.cells[:, 2], targets.offsets)
    mask = Tensor(targets.labels[..., None])
    reg = ops.sum(ops.mul(reg, mask))
    return ops.scale(ops.add(cls, reg), 1.0 / npos)
