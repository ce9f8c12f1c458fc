"""Synthetic shape scenes, class splits and episodic sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import map_coordinates

SHAPES = ("square", "disk", "triangle", "cross", "ring")
COLORS = {"red": (0.85, 0.22, 0.18), "blue": (0.20, 0.38, 0.88)}
CLASS_NAMES = tuple(f"{s}-{c}" for s in SHAPES for c in COLORS)
NUM_CLASSES = len(CLASS_NAMES)
SUPPORT_SIZE = 32


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max])


@dataclass
class SyntheticScene:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    objects: list  # [(class_id, BoundingBox)]

    def boxes_of(self, cls: int) -> list[BoundingBox]:
        return [b for c, b in self.objects if c == cls]


@dataclass(frozen=True)
class SceneLayout:
    """Rendering parameters; scenes are a pure function of (rng state, layout)."""

    size: int = 64
    min_objects: int = 1
    max_objects: int = 4
    min_extent: int = 12
    max_extent: int = 24
    color_jitter: float = 0.12
    background_contrast: float = 0.18
    pixel_noise: float = 0.04
    max_overlap: float = 0.1
    brightness: tuple = (1.0, 1.0)  # per-object multiplicative lighting range
    occlusion_prob: float = 0.0  # chance that a strip of the object is hidden
    occlusion_max: float = 0.5  # largest hidden fraction of the object's extent


@dataclass(frozen=True)
class ClassSplit:
    base: tuple
    novel: tuple

    def __post_init__(self):
        if set(self.base) & set(self.novel):
            raise ValueError("base and novel classes must be disjoint")

    @property
    def all(self) -> tuple:
        return tuple(sorted(self.base + self.novel))


# Every novel class shares its shape with one base class and its colour with others.
DEFAULT_SPLIT = ClassSplit(base=(0, 2, 3, 5, 6, 7, 8), novel=(1, 4, 9))


def class_name(cls: int) -> str:
    return CLASS_NAMES[cls]


@lru_cache(maxsize=4096)
def _shape_mask(shape: str, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    u = (xx + 0.5) / w * 2 - 1
    v = (yy + 0.5) / h * 2 - 1
    if shape == "square":
        mask = np.ones((h, w), bool)
    elif shape == "disk":
        mask = np.sqrt(u ** 2 + v ** 2) <= 1.0
    elif shape == "ring":
        r = np.sqrt(u ** 2 + v ** 2)
        mask = (r <= 1.0) & (r >= 0.5)
    elif shape == "cross":
        mask = (np.abs(u) <= 0.34) | (np.abs(v) <= 0.34)
    else:
        # triangle with its apex at the top edge
        mask = np.abs(u) <= (v + 1) / 2
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=8)
def _upsample_matrix(size: int, coarse: int) -> np.ndarray:
    # linear interpolation weights from a coarse grid onto ``size`` pixel centres
    pos = (np.arange(size) + 0.5) * coarse / size - 0.5
    pos = np.clip(pos, 0, coarse - 1)
    lo = np.minimum(np.floor(pos).astype(int), coarse - 2)
    frac = pos - lo
    mat = np.zeros((size, coarse))
    mat[np.arange(size), lo] = 1 - frac
    mat[np.arange(size), lo + 1] = frac
    return mat


def _background(rng: np.random.Generator, layout: SceneLayout) -> np.ndarray:
    s = layout.size
    coarse = rng.random((5, 5, 3))
    up = _upsample_matrix(s, 5)
    smooth = (up @ coarse.transpose(2, 0, 1) @ up.T).transpose(1, 2, 0)
    gray = smooth.mean(axis=-1, keepdims=True)
    return 0.5 + layout.background_contrast * (0.7 * (gray - 0.5) + 0.3 * (smooth - 0.5))


def _overlap(box: BoundingBox, others: Sequence[BoundingBox]) -> float:
    best = 0.0
    for o in others:
        iw = min(box.x_max, o.x_max) - max(box.x_min, o.x_min)
        ih = min(box.y_max, o.y_max) - max(box.y_min, o.y_min)
        if iw > 0 and ih > 0:
            best = max(best, iw * ih / min(box.area, o.area))
    return best


def _paint(image: np.ndarray, rng: np.random.Generator, cls: int, layout: SceneLayout,
           placed: Sequence[BoundingBox]) -> Optional[BoundingBox]:
    shape = SHAPES[cls // len(COLORS)]
    color = np.array(list(COLORS.values())[cls % len(COLORS)])
    s = layout.size
    for _ in range(30):
        w = int(rng.integers(layout.min_extent, layout.max_extent + 1))
        h = int(np.clip(round(w * rng.uniform(0.8, 1.25)), layout.min_extent, layout.max_extent))
        x0 = int(rng.integers(1, s - w))
        y0 = int(rng.integers(1, s - h))
        mask = _shape_mask(shape, h, w)
        ys, xs = np.nonzero(mask)
        box = BoundingBox(x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
        if _overlap(box, placed) > layout.max_overlap:
            continue
        tint = color * rng.uniform(*layout.brightness) + layout.color_jitter * rng.standard_normal(3)
        region = image[y0:y0 + h, x0:x0 + w]
        before = region.copy()
        region[mask] = np.clip(tint, 0.0, 1.0)
        if layout.occlusion_prob and rng.random() < layout.occlusion_prob:
            # hide a strip along one side; the box stays the full (amodal) extent
            side = int(rng.integers(4))
            frac = rng.uniform(0.15, layout.occlusion_max)
            span = w if side < 2 else h
            cut = max(1, int(round(frac * span)))
            sl = [slice(None), slice(None)]
            sl[1 if side < 2 else 0] = slice(0, cut) if side % 2 == 0 else slice(span - cut, span)
            region[tuple(sl)] = before[tuple(sl)]
        return box
    return None


def generate_scene(rng: np.random.Generator, classes: Sequence[int], layout: SceneLayout = SceneLayout(),
                   required: Optional[int] = None, n_objects: Optional[int] = None) -> SyntheticScene:
    """Render 1-4 coloured shapes on a smooth noisy background with exact boxes.

    ``required`` forces the first object's class; the others are drawn
    uniformly from ``classes``.
    """
    classes = list(classes)
    if not classes:
        raise ValueError("generate_scene needs at least one class")
    if n_objects is None:
        n_objects = int(rng.integers(layout.min_objects, layout.max_objects + 1))
    image = _background(rng, layout)
    objects: list = []
    for i in range(n_objects):
        cls = required if (i == 0 and required is not None) else int(rng.choice(classes))
        box = _paint(image, rng, cls, layout, [b for _, b in objects])
        if box is not None:
            objects.append((cls, box))
    if not objects:
        # placement only fails under crowding; a lone object always fits
        cls = required if required is not None else int(rng.choice(classes))
        objects.append((cls, _paint(image, rng, cls, layout, [])))
    image = image + layout.pixel_noise * rng.standard_normal(image.shape)
    return SyntheticScene(np.clip(image, 0.0, 1.0), objects)


def crop_resize(image: np.ndarray, box: BoundingBox, size: int = SUPPORT_SIZE) -> np.ndarray:
    """Bilinear crop of ``box`` resampled to ``size x size``."""
    ys = box.y_min + (np.arange(size) + 0.5) * (box.y_max - box.y_min) / size - 0.5
    xs = box.x_min + (np.arange(size) + 0.5) * (box.x_max - box.x_min) / size - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack(
        [map_coordinates(image[..., ch], [gy, gx], order=1, mode="nearest") for ch in range(image.shape[-1])],
        axis=-1,
    )


def support_example(rng: np.random.Generator, cls: int, layout: SceneLayout = SceneLayout()) -> tuple:
    """One annotated image holding a single object of ``cls`` and its crop."""
    scene = generate_scene(rng, [cls], layout, required=cls, n_objects=1)
    return scene, crop_resize(scene.image, scene.objects[0][1])


@dataclass
class Episode:
    classes: tuple
    support: dict  # class -> list of (32, 32, 3) crops
    query: list  # SyntheticScene, annotations restricted to ``classes``
    phase: str = "base"

    def support_array(self, order: Optional[Sequence[int]] = None) -> np.ndarray:
        order = self.classes if order is None else order
        return np.stack([np.stack(self.support[c]) for c in order])


@dataclass
class NovelRegistry:
    """The fixed annotated exemplars available for each novel class."""

    examples: dict = field(default_factory=dict)  # class -> list of (scene, crop)

    @classmethod
    def draw(cls, rng: np.random.Generator, split: ClassSplit, k: int,
             layout: SceneLayout = SceneLayout()) -> "NovelRegistry":
        return cls({c: [support_example(rng, c, layout) for _ in range(k)] for c in split.novel})

    def crops(self, cls: int, k: Optional[int] = None) -> list[np.ndarray]:
        items = self.examples[cls] if k is None else self.examples[cls][:k]
        return [crop for _, crop in items]

    def scenes(self, cls: int) -> list[SyntheticScene]:
        return [scene for scene, _ in self.examples[cls]]

    def prefix(self, k: int) -> "NovelRegistry":
        return NovelRegistry({c: v[:k] for c, v in self.examples.items()})


def sample_episode(rng: np.random.Generator, split: ClassSplit, phase: str, n_way: int, k_shot: int,
                   queries_per_class: int, layout: SceneLayout = SceneLayout(),
                   registry: Optional[NovelRegistry] = None) -> Episode:
    """Draw one N-way K-shot episode.

    Base episodes use base classes only. Fine-tuning episodes always contain
    every novel class, filled up with base classes; novel supports and novel
    query images are the registry's fixed exemplars.
    """
    if k_shot < 1 or queries_per_class < 1:
        raise ValueError("k_shot and queries_per_class must be >= 1")
    if phase == "base":
        if n_way > len(split.base):
            raise ValueError(f"{n_way}-way episode needs {n_way} base classes, only {len(split.base)} exist")
        classes = tuple(sorted(int(c) for c in rng.choice(split.base, n_way, replace=False)))
        novel = ()
    elif phase == "finetune":
        if registry is None:
            raise ValueError("fine-tuning episodes need the novel registry")
        if n_way > len(split.base) + len(split.novel):
            raise ValueError(f"{n_way}-way episode exceeds the {len(split.all)} available classes")
        novel = tuple(split.novel[:n_way])
        fill = n_way - len(novel)
        extra = tuple(int(c) for c in rng.choice(split.base, fill, replace=False)) if fill else ()
        classes = tuple(sorted(novel + extra))
    else:
        raise ValueError(f"unknown phase {phase!r}")

    support = {}
    for c in classes:
        if c in novel:
            crops = registry.crops(c, k_shot)
            if len(crops) < k_shot:
                raise ValueError(f"registry holds {len(crops)} exemplars of class {c}, {k_shot} requested")
            support[c] = crops
        else:
            support[c] = [support_example(rng, c, layout)[1] for _ in range(k_shot)]

    query = []
    for c in classes:
        if c in novel:
            fixed = registry.scenes(c)[:k_shot]
            query.extend(fixed[i % len(fixed)] for i in range(queries_per_class))
        else:
            # novel objects only ever come from the registry, so fresh scenes hold base classes only
            pool = [x for x in classes if x not in novel]
            query.extend(generate_scene(rng, pool, layout, required=c) for _ in range(queries_per_class))
    return Episode(classes, support, query, phase)
