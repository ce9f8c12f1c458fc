"""End-to-end gradient verification of a detector (backbone, pipeline, head, loss)."""

from __future__ import annotations

import contextlib
from typing import Iterator, Optional

import numpy as np

from .. import ops
from ..gradcheck import gradcheck_params
from ..pipeline import PipelineConfig
from ..tensor import Tensor, record
from .data import ClassSplit, SceneLayout, generate_scene, sample_episode, support_example
from .loss import build_targets, compute_loss
from .metrics import average_precision
from .model import Detector

GRADCHECK_TOL = 1e-4
# small scenes keep the finite-difference sweep cheap; 32x32 still yields a 4x4 map
_LAYOUT = SceneLayout(size=32, max_objects=2, min_extent=10, max_extent=16)


def detector_gradcheck(config: PipelineConfig, seed: int = 0, max_coords: Optional[int] = 4,
                       eps: float = 1e-6, levels: int = 1) -> dict[str, float]:
    """Max relative gradient error per named parameter, through the full detection loss."""
    rng = np.random.default_rng(seed)
    detector = Detector(config, seed=seed, levels=levels, hidden=8)
    # jitter the AAF weights off their identity init so every path carries signal
    for name, p in detector.aaf.parameters().items():
        p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    classes = [0, 3]
    scenes = [generate_scene(rng, classes, _LAYOUT, required=c) for c in classes]
    support = np.stack([np.stack([support_example(rng, c, _LAYOUT)[1] for _ in range(2)]) for c in classes])
    images = np.stack([s.image for s in scenes])

    def loss() -> Tensor:
        preds = detector(images, support)
        return compute_loss(preds, build_targets(scenes, classes, preds.cells))

    return gradcheck_params(loss, detector.parameters(), eps=eps, max_coords=max_coords, seed=seed)


@contextlib.contextmanager
def corrupted_adjoint(op_name: str, factor: float = 1.5) -> Iterator[None]:
    """Test hook: scale the gradient flowing back out of ``ops.<op_name>`` by ``factor``.

    The forward value is untouched, so only a gradient check can notice.
    """
    original = getattr(ops, op_name, None)
    if original is None or not callable(original):
        raise ValueError(f"no op named {op_name!r}")

    def faulty(*args, **kwargs):
        out = original(*args, **kwargs)
        if isinstance(out, Tensor):
            return record(out.data, (out,), lambda g: (g * factor,))
        return out

    setattr(ops, op_name, faulty)
    try:
        yield
    finally:
        setattr(ops, op_name, original)


def episode_map(detector: Detector, episode) -> float:
    """mAP@0.5 of ``detector`` on an episode's own query scenes and support."""
    from .training import detect

    images = np.stack([s.image for s in episode.query])
    dets = detect(detector, images, episode.support_array())
    aps = []
    for j, c in enumerate(episode.classes):
        preds = [(i, score, box) for i, per in enumerate(dets) for score, box in per[j]]
        gts = [(i, box) for i, scene in enumerate(episode.query) for box in scene.boxes_of(c)]
        aps.append(average_precision(preds, gts))
    return float(np.mean(aps))


def overfit_episode(config: PipelineConfig, max_steps: int = 500, target: float = 0.9, lr: float = 1e-2,
                    momentum: float = 0.9, seed: int = 0, classes=(0, 3), queries_per_class: int = 4,
                    check_every: int = 25) -> tuple[int, float, list]:
    """Train on one frozen 2-class episode until its mAP reaches ``target``.

    Returns (steps taken, last mAP, [(step, loss, mAP)] at each check).
    """
    from .training import SGD, train_step

    rng = np.random.default_rng(seed)
    split = ClassSplit(tuple(classes), ())
    episode = sample_episode(rng, split, "base", len(classes), 1, queries_per_class)
    support = episode.support_array()
    detector = Detector(config, seed=seed)
    opt = SGD(detector.parameters().values(), lr, momentum)
    history = []
    score = 0.0
    for step in range(1, max_steps + 1):
        loss = train_step(detector, episode.query, episode.classes, support, opt)
        if step % check_every == 0 or step == max_steps:
            score = episode_map(detector, episode)
            history.append((step, loss, score))
            if score >= target:
                return step, score, history
    return max_steps, score, history
