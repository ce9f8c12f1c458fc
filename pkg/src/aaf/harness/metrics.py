"""IoU, greedy NMS and all-point average precision."""

from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from .data import BoundingBox


def compute_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(boxes: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(P, 4)`` and ``(Q, 4)`` xyxy arrays."""
    lt = np.maximum(boxes[:, None, :2], others[None, :, :2])
    rb = np.minimum(boxes[:, None, 2:], others[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    area_b = (others[:, 2] - others[:, 0]) * (others[:, 3] - others[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float = 0.5) -> np.ndarray:
    """Indices kept by greedy non-maximum suppression, highest score first."""
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ious = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ious <= iou_thresh]
    return np.array(keep, dtype=int)


def match_detections(preds: Sequence[tuple], gts: Sequence[tuple], iou_thresh: float = 0.5) -> np.ndarray:
    """True-positive flags for ``preds`` sorted by descending score (stable).

    Each prediction claims the unmatched ground truth of its image with the
    highest IoU, if that IoU reaches ``iou_thresh``.
    """
    by_image: dict[Hashable, list] = {}
    for img, box in gts:
        by_image.setdefault(img, []).append(box)
    used = {img: np.zeros(len(v), bool) for img, v in by_image.items()}
    order = sorted(range(len(preds)), key=lambda i: -preds[i][1])
    tp = np.zeros(len(preds), bool)
    for rank, i in enumerate(order):
        img, _, box = preds[i]
        cands = by_image.get(img, [])
        best, best_j = -1.0, -1
        for j, gt in enumerate(cands):
            if used[img][j]:
                continue
            iou = compute_iou(box, gt)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_thresh:
            used[img][best_j] = True
            tp[rank] = True
    return tp


def average_precision(preds: Sequence[tuple], gts: Sequence[tuple], iou_thresh: float = 0.5) -> float:
    """All-point interpolated AP.

    ``preds`` holds ``(image_id, score, BoundingBox)`` and ``gts`` holds
    ``(image_id, BoundingBox)``. Returns 0.0 when there are no ground truths
    or no predictions.
    """
    if not gts or not preds:
        return 0.0
    tp = match_detections(preds, gts, iou_thresh)
    ctp = np.cumsum(tp)
    recall = ctp / len(gts)
    precision = ctp / np.arange(1, len(tp) + 1)
    # precision envelope, then sum over recall steps
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))
