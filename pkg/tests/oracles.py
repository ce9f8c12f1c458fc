"""Independent reference implementations and generators shared by the tests."""

from __future__ import annotations

import random
from fractions import Fraction

import numpy as np

from aaf.harness.data import BoundingBox
from aaf.operators import (
    AFFINITY_KINDS,
    AffinityKind,
    AttentionKind,
    FusionComponent,
    FusionKind,
)
from aaf.pipeline import AGGREGATIONS, ORDERS, PipelineConfig


# -- geometry -------------------------------------------------------------------


def iou_by_area(a: BoundingBox, b: BoundingBox) -> Fraction:
    """IoU from exact rational areas: clip the overlap rectangle, then |A|+|B|-|A∩B|."""
    ax0, ay0, ax1, ay1 = (Fraction(v) for v in (a.x_min, a.y_min, a.x_max, a.y_max))
    bx0, by0, bx1, by1 = (Fraction(v) for v in (b.x_min, b.y_min, b.x_max, b.y_max))
    w = max(Fraction(0), min(ax1, bx1) - max(ax0, bx0))
    h = max(Fraction(0), min(ay1, by1) - max(ay0, by0))
    inter = w * h
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def random_box(rng: np.random.Generator, size: int = 16, integer: bool = True) -> BoundingBox:
    if integer:
        x0, x1 = sorted(rng.choice(size + 1, 2, replace=False))
        y0, y1 = sorted(rng.choice(size + 1, 2, replace=False))
        return BoundingBox(int(x0), int(y0), int(x1), int(y1))
    while True:
        x0, x1 = sorted(rng.uniform(0, size, 2))
        y0, y1 = sorted(rng.uniform(0, size, 2))
        if x0 < x1 and y0 < y1:
            return BoundingBox(float(x0), float(y0), float(x1), float(y1))


# -- average precision -----------------------------------------------------------


def brute_force_ap(preds, gts, thresh=Fraction(1, 2)) -> tuple[Fraction, list[bool]]:
    """All-point AP by enumerating every ranked prefix, in exact arithmetic.

    Returns the AP and the true-positive flag of each prediction in rank order.
    """
    if not gts or not preds:
        return Fraction(0), []
    ranked = sorted(range(len(preds)), key=lambda i: (-preds[i][1], i))
    taken = [False] * len(gts)
    flags = []
    for i in ranked:
        img, _, box = preds[i]
        best, best_j = Fraction(-1), None
        for j, (gimg, gbox) in enumerate(gts):
            if gimg != img or taken[j]:
                continue
            iou = iou_by_area(box, gbox)
            if iou > best:
                best, best_j = iou, j
        hit = best_j is not None and best >= thresh
        if hit:
            taken[best_j] = True
        flags.append(hit)
    # one (recall, precision) point per prefix of the ranking
    points = []
    tp = 0
    for n, hit in enumerate(flags, start=1):
        tp += hit
        points.append((Fraction(tp, len(gts)), Fraction(tp, n)))
    ap = Fraction(0)
    prev_recall = Fraction(0)
    for recall in sorted({r for r, _ in points}):
        if recall == 0:
            continue
        best_precision = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_precision
        prev_recall = recall
    return ap, flags


def random_ap_instance(rng: np.random.Generator, max_boxes: int = 10, n_images: int = 3):
    """Predictions and ground truths with at most ``max_boxes`` boxes in total."""
    n_gt = int(rng.integers(0, max_boxes + 1))
    n_pred = int(rng.integers(0, max_boxes - n_gt + 1))
    gts = [(int(rng.integers(n_images)), random_box(rng, 8)) for _ in range(n_gt)]
    preds = []
    for _ in range(n_pred):
        if gts and rng.random() < 0.6:
            # perturb a ground truth so matches and near-misses both occur
            img, g = gts[int(rng.integers(len(gts)))]
            dx, dy = rng.integers(-2, 3, 2)
            box = BoundingBox(g.x_min + dx, g.y_min + dy, g.x_max + dx, g.y_max + dy)
        else:
            img, box = int(rng.integers(n_images)), random_box(rng, 8)
        # a coarse score grid makes ties common
        preds.append((img, float(rng.integers(0, 5)) / 4, box))
    return preds, gts


# -- configuration generators -----------------------------------------------------


def random_config(rnd: random.Random) -> PipelineConfig:
    def affinity():
        kind = rnd.choice(AFFINITY_KINDS)
        if kind != "softmax_dot_product":
            return AffinityKind(kind)
        return AffinityKind(kind, rnd.choice([None, 1.0, 0.125, rnd.uniform(0.01, 10.0)]))

    def attention():
        kind = rnd.choice(["none", "support_pool_reweight", "background_attenuation", "similarity_reweight"])
        return AttentionKind(kind, rnd.choice(["max", "avg"]) if kind == "support_pool_reweight" else None)

    comps = tuple(FusionComponent(rnd.choice(["mul", "sub", "add", "id", "cat"]), rnd.random() < 0.3)
                  for _ in range(rnd.randint(0, 4)))
    return PipelineConfig(
        order=rnd.choice(ORDERS),
        align_query=affinity(),
        align_support=affinity(),
        attend_query=attention(),
        attend_support=attention(),
        fusion=FusionKind(comps, rnd.choice(["none", "max", "avg"])),
        shots_aggregation=rnd.choice(AGGREGATIONS),
    )


_JUNK = ["[", "]", "(", ")", "=", ",", ".", "#", "\n", " ", "\t", "x", "mull", "fusion", "[fusion]",
         "[attention]", "support_pool_reweight(", "1e309", "-1", "0", "nan", "é", "\x00", "learnable(",
         "query", "inv_sqrt_d", "==", "[[", "]]", '"', "'", "\\", "softmax_dot_product(0)"]


def mutate(text: str, rnd: random.Random) -> str:
    """One to three random edits: delete, insert, replace, duplicate or swap lines, truncate."""
    for _ in range(rnd.randint(1, 3)):
        choice = rnd.randrange(7)
        pos = rnd.randrange(len(text) + 1)
        if choice == 0 and text:
            end = min(len(text), pos + rnd.randint(1, 8))
            text = text[:pos] + text[end:]
        elif choice == 1:
            text = text[:pos] + rnd.choice(_JUNK) + text[pos:]
        elif choice == 2 and text:
            end = min(len(text), pos + rnd.randint(1, 6))
            text = text[:pos] + rnd.choice(_JUNK) + text[end:]
        elif choice == 3:
            lines = text.split("\n")
            i = rnd.randrange(len(lines))
            lines.insert(i, lines[i])
            text = "\n".join(lines)
        elif choice == 4:
            lines = text.split("\n")
            i, j = rnd.randrange(len(lines)), rnd.randrange(len(lines))
            lines[i], lines[j] = lines[j], lines[i]
            text = "\n".join(lines)
        elif choice == 5:
            text = text[:pos]
        else:
            text = "".join(chr(rnd.randrange(32, 127)) if rnd.random() < 0.02 else ch for ch in text)
    return text
