"""Two-phase episodic training (base, then fine-tuning) and mAP evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from ..pipeline import PipelineConfig
from ..tensor import GradTape, sgd_step
from .data import (
    DEFAULT_SPLIT,
    ClassSplit,
    Episode,
    NovelRegistry,
    SceneLayout,
    generate_scene,
    sample_episode,
    support_example,
)
from .loss import build_targets, compute_loss
from .metrics import average_precision, nms
from .data import BoundingBox
from .model import Detector

log = logging.getLogger(__name__)

SHOTS_GRID = (1, 3, 5, 10)
MAX_REGISTERED = max(SHOTS_GRID)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Training budget. Defaults follow the reference ratios at desk scale.

    Fine-tuning always performs ``finetune_updates`` weight updates, whatever
    k is, so runs with different shot counts stay comparable.
    """

    base_episodes: int = 200
    queries_per_class: int = 50
    n_way: int = 5
    batch_size: int = 8
    base_lr: float = 1e-3
    finetune_lr: float = 1e-4
    finetune_updates: int = 200
    eval_every: int = 0
    eval_scenes: int = 100
    levels: int = 1
    momentum: float = 0.0
    grad_clip: Optional[float] = None
    layout: SceneLayout = SceneLayout()


# Shorter, faster-learning protocol used for the k-shot trend check. Plain SGD at
# 1e-3 barely separates shapes within a desk budget; heavy-ball momentum and a
# 10x larger rate do, while keeping the fine-tune rate at base / 10.
TREND_SCHEDULE = Schedule(
    base_episodes=400,
    queries_per_class=16,
    base_lr=1e-2,
    finetune_lr=1e-3,
    finetune_updates=2000,
    momentum=0.9,
)

PROTOCOLS = {"default": Schedule(), "trend": TREND_SCHEDULE}


@dataclass
class EvalReport:
    per_class_ap: dict
    base_map: float
    novel_map: float
    k: int
    seed: int
    base_std: float = 0.0
    novel_std: float = 0.0
    seeds: tuple = ()

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "seed": self.seed,
            "eval_seeds": list(self.seeds),
            "base_map": self.base_map,
            "novel_map": self.novel_map,
            "base_map_std": self.base_std,
            "novel_map_std": self.novel_std,
            "per_class_ap": {str(c): v for c, v in sorted(self.per_class_ap.items())},
        }


@dataclass
class LogRow:
    episode: int
    phase: str
    loss: float
    base_map: Optional[float]
    novel_map: Optional[float]
    k: int
    seed: int


@dataclass
class TrainResult:
    detector: Detector
    registry: NovelRegistry
    log: list = field(default_factory=list)
    report: Optional[EvalReport] = None


def _streams(seed: int) -> dict[str, np.random.Generator]:
    names = ("init", "base", "registry", "finetune", "eval")
    seqs = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(s) for n, s in zip(names, seqs)}


class SGD:
    """SGD with optional heavy-ball momentum; ``momentum=0`` is exactly :func:`sgd_step`."""

    def __init__(self, params, lr: float, momentum: float = 0.0, grad_clip: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.params))
            if norm > self.grad_clip:
                for p in self.params:
                    p.grad = p.grad * (self.grad_clip / norm)
        if self.momentum:
            for i, p in enumerate(self.params):
                self.velocity[i] = self.momentum * self.velocity[i] + p.grad
                p.grad = self.velocity[i]
        sgd_step(self.params, self.lr)


def train_step(detector: Detector, scenes, classes: Sequence[int], support: np.ndarray, opt: SGD) -> float:
    """One SGD update on a batch of query scenes; returns the loss value."""
    images = np.stack([s.image for s in scenes])
    with GradTape() as tape:
        preds = detector(images, support)
        targets = build_targets(scenes, classes, preds.cells)
        loss = compute_loss(preds, targets)
    value = loss.item()
    if not math.isfinite(value):
        raise DivergenceError(f"loss became {value}; lower the learning rate")
    tape.backward(loss)
    tape.reset()
    opt.step()
    return value


def _fresh_support(rng, episode: Episode, k: int, layout: SceneLayout,
                   registry: Optional[NovelRegistry]) -> np.ndarray:
    crops = []
    for c in episode.classes:
        if registry is not None and c in registry.examples:
            crops.append(np.stack(registry.crops(c, k)))
        else:
            crops.append(np.stack([support_example(rng, c, layout)[1] for _ in range(k)]))
    return np.stack(crops)


def _run_episode(detector, rng, episode: Episode, k: int, schedule: Schedule, opt: SGD,
                 registry: Optional[NovelRegistry], max_steps: Optional[int] = None) -> list[float]:
    order = rng.permutation(len(episode.query))
    losses = []
    bs = schedule.batch_size
    for start in range(0, len(order), bs):
        if max_steps is not None and len(losses) >= max_steps:
            break
        batch = [episode.query[i] for i in order[start:start + bs]]
        # first batch uses the episode's own support; later batches draw a new one
        support = episode.support_array() if start == 0 else _fresh_support(
            rng, episode, k, schedule.layout, registry)
        losses.append(train_step(detector, batch, episode.classes, support, opt))
    return losses


def train_base(config: PipelineConfig, split: ClassSplit = DEFAULT_SPLIT, schedule: Schedule = Schedule(),
               seed: int = 0, on_episode: Optional[Callable] = None) -> Detector:
    """Base training on base classes only, one shot per class. Independent of k."""
    rng = _streams(seed)
    detector = Detector(config, seed=int(rng["init"].integers(2 ** 31)), levels=schedule.levels)
    opt = SGD(detector.parameters().values(), schedule.base_lr, schedule.momentum, schedule.grad_clip)
    for ep in range(schedule.base_episodes):
        episode = sample_episode(rng["base"], split, "base", schedule.n_way, 1, schedule.queries_per_class,
                                 schedule.layout)
        losses = _run_episode(detector, rng["base"], episode, 1, schedule, opt, None)
        if on_episode is not None:
            on_episode(ep, "base", float(np.mean(losses)), detector)
    return detector


def register_novel(split: ClassSplit, k: int, seed: int, layout: SceneLayout = SceneLayout()) -> NovelRegistry:
    """The k fixed exemplars of each novel class; smaller k gives a prefix of larger k."""
    rng = _streams(seed)["registry"]
    full = NovelRegistry.draw(rng, split, MAX_REGISTERED, layout)
    return full.prefix(k) if k <= MAX_REGISTERED else NovelRegistry.draw(rng, split, k, layout)


def finetune(detector: Detector, split: ClassSplit, k: int, schedule: Schedule, seed: int,
             registry: NovelRegistry, on_episode: Optional[Callable] = None) -> Detector:
    rng = _streams(seed)["finetune"]
    rng = np.random.default_rng([int(rng.integers(2 ** 31)), k])
    n_way = min(schedule.n_way, len(split.all))
    steps_per_episode = math.ceil(n_way * k / schedule.batch_size)
    opt = SGD(detector.parameters().values(), schedule.finetune_lr, schedule.momentum, schedule.grad_clip)
    done, ep = 0, 0
    while done < schedule.finetune_updates:
        episode = sample_episode(rng, split, "finetune", n_way, k, k, schedule.layout, registry)
        losses = _run_episode(detector, rng, episode, k, schedule, opt, registry,
                              max_steps=min(steps_per_episode, schedule.finetune_updates - done))
        done += len(losses)
        if on_episode is not None:
            on_episode(ep, "finetune", float(np.mean(losses)), detector)
        ep += 1
    return detector


# -- evaluation ---------------------------------------------------------------


@dataclass
class EvalSet:
    scenes: list
    support: dict  # class -> list of crops


def make_eval_set(split: ClassSplit, k: int, eval_seed: int, n_scenes: int,
                  layout: SceneLayout = SceneLayout(), registry: Optional[NovelRegistry] = None) -> EvalSet:
    rng = np.random.default_rng([eval_seed, 7919])
    classes = split.all
    scenes = [generate_scene(rng, classes, layout) for _ in range(n_scenes)]
    support = {}
    for c in classes:
        if registry is not None and c in registry.examples:
            support[c] = registry.crops(c, k)
        else:
            support[c] = [support_example(rng, c, layout)[1] for _ in range(k)]
    return EvalSet(scenes, support)


def detect(detector: Detector, images: np.ndarray, support: np.ndarray, score_thresh: float = 0.05,
           nms_thresh: float = 0.5, max_per_image: int = 20, chunk: int = 25) -> list[list[list[tuple]]]:
    """Detections ``[image][class] -> [(score, BoundingBox)]`` after per-class NMS."""
    feats = detector.encode_support(support)
    out = []
    for start in range(0, len(images), chunk):
        preds = detector(images[start:start + chunk], support, support_feats=feats)
        scores, boxes = preds.scores(), preds.boxes()
        for i in range(scores.shape[0]):
            per_class = []
            for j in range(scores.shape[1]):
                s, b = scores[i, j], boxes[i, j]
                sel = np.nonzero(s > score_thresh)[0]
                b_sel = np.clip(b[sel], 0.0, images.shape[2])
                valid = (b_sel[:, 2] > b_sel[:, 0]) & (b_sel[:, 3] > b_sel[:, 1])
                sel, b_sel = sel[valid], b_sel[valid]
                keep = nms(b_sel, s[sel], nms_thresh)[:max_per_image]
                per_class.append([(float(s[sel][q]), BoundingBox(*b_sel[q])) for q in keep])
            out.append(per_class)
    return out


def _evaluate_once(detector: Detector, split: ClassSplit, eval_set: EvalSet) -> dict:
    classes = list(split.all)
    support = np.stack([np.stack(eval_set.support[c]) for c in classes])
    images = np.stack([s.image for s in eval_set.scenes])
    dets = detect(detector, images, support)
    aps = {}
    for j, c in enumerate(classes):
        preds = [(i, score, box) for i, per in enumerate(dets) for score, box in per[j]]
        gts = [(i, box) for i, scene in enumerate(eval_set.scenes) for box in scene.boxes_of(c)]
        aps[c] = average_precision(preds, gts, 0.5)
    return aps


def evaluate(detector: Detector, split: ClassSplit, k: int, seeds: Sequence[int] = (0,),
             registry: Optional[NovelRegistry] = None, n_scenes: int = 100,
             layout: SceneLayout = SceneLayout(), seed: int = 0) -> EvalReport:
    """mAP@0.5 on base and novel classes, averaged over evaluation seeds.

    Each evaluation seed draws its own scenes and base-class supports; novel
    classes use the registered exemplars when a registry is given.
    """
    runs = []
    for s in seeds:
        eval_set = make_eval_set(split, k, s, n_scenes, layout, registry)
        runs.append(_evaluate_once(detector, split, eval_set))
    per_class = {c: float(np.mean([r[c] for r in runs])) for c in split.all}
    base = [float(np.mean([r[c] for c in split.base])) for r in runs]
    novel = [float(np.mean([r[c] for c in split.novel])) for r in runs]
    return EvalReport(
        per_class_ap=per_class,
        base_map=float(np.mean(base)),
        novel_map=float(np.mean(novel)),
        k=k,
        seed=seed,
        base_std=float(np.std(base)) if len(runs) > 1 else 0.0,
        novel_std=float(np.std(novel)) if len(runs) > 1 else 0.0,
        seeds=tuple(seeds),
    )


def train(config: PipelineConfig, split: ClassSplit = DEFAULT_SPLIT, schedule: Schedule = Schedule(),
          k: int = 1, seed: int = 0, eval_seeds: Sequence[int] = (0,),
          base_detector: Optional[Detector] = None) -> TrainResult:
    """Base training then k-shot fine-tuning, with a per-episode metrics log.

    ``base_detector`` skips the base phase (it is consumed and fine-tuned in place).
    """
    rows: list[LogRow] = []
    registry = register_novel(split, k, seed, schedule.layout)

    def logger(ep, phase, loss, det):
        base_map = novel_map = None
        if schedule.eval_every and (ep + 1) % schedule.eval_every == 0:
            rep = evaluate(det, split, k, eval_seeds[:1], registry, schedule.eval_scenes, schedule.layout, seed)
            base_map, novel_map = rep.base_map, rep.novel_map
        rows.append(LogRow(ep, phase, loss, base_map, novel_map, k, seed))
        log.debug("%s episode %d loss %.5f", phase, ep, loss)

    detector = base_detector if base_detector is not None else train_base(config, split, schedule, seed, logger)
    finetune(detector, split, k, schedule, seed, registry, logger)
    report = evaluate(detector, split, k, eval_seeds, registry, schedule.eval_scenes, schedule.layout, seed)
    return TrainResult(detector, registry, rows, report)


def with_schedule(schedule: Schedule, **changes) -> Schedule:
    return replace(schedule, **changes)
