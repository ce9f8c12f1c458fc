"""Tiny convolutional backbone and anchor-free detection head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import ops
from ..pipeline import AAF, PipelineConfig
from ..tensor import ShapeError, Tensor

FEATURE_DIM = 64
BACKBONE_WIDTHS = (8, 16, 32, FEATURE_DIM)
BACKBONE_STRIDES = (2, 2, 2, 1)


def _conv_param(rng, kh, kw, cin, cout, name):
    std = np.sqrt(2.0 / (kh * kw * cin))
    return (Tensor(std * rng.standard_normal((kh, kw, cin, cout)), requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias"))


class Backbone:
    """Four 3x3 conv+ReLU blocks, total stride 8 (64x64 -> 8x8x64).

    With ``levels=2`` an extra stride-2 block yields a second 4x4 level.
    """

    def __init__(self, rng: np.random.Generator, levels: int = 1, widths=BACKBONE_WIDTHS,
                 strides=BACKBONE_STRIDES):
        if levels not in (1, 2):
            raise ValueError("levels must be 1 or 2")
        self.levels = levels
        self.strides = strides
        self.blocks = []
        cin = 3
        for i, cout in enumerate(widths):
            self.blocks.append(_conv_param(rng, 3, 3, cin, cout, f"backbone.{i}"))
            cin = cout
        if levels == 2:
            self.blocks.append(_conv_param(rng, 3, 3, cin, cin, "backbone.p2"))
        self.dim = cin

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.strides))

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for pair in self.blocks for t in pair}

    def __call__(self, images) -> list[tuple[Tensor, tuple[int, int]]]:
        """Feature maps ``[(B, h*w, d), (h, w)]`` per level for ``(B, H, W, 3)`` images."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if x.ndim == 3:
            x = ops.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[-1] != 3:
            raise ShapeError(f"backbone expects (B, H, W, 3) images, got {x.shape}")
        if x.shape[1] % self.total_stride or x.shape[2] % self.total_stride:
            raise ShapeError(f"image size {x.shape[1:3]} must be divisible by {self.total_stride}")
        x = ops.scale(ops.add(x, Tensor(-0.5)), 4.0)
        n_main = len(self.strides)
        for i in range(n_main):
            w, b = self.blocks[i]
            x = ops.relu(ops.conv2d(x, w, b, stride=self.strides[i], padding=1))
        outs = [x]
        if self.levels == 2:
            w, b = self.blocks[n_main]
            outs.append(ops.relu(ops.conv2d(x, w, b, stride=2, padding=1)))
        result = []
        for y in outs:
            n, h, wd, d = y.shape
            result.append((ops.reshape(y, (n, h * wd, d)), (h, wd)))
        return result


class Head:
    """Shared per-cell head: hidden 1x1 layer, then 1 score logit and 4 log-offsets."""

    def __init__(self, rng: np.random.Generator, d_in: int, hidden: int = 32, prior: float = 0.01):
        std = np.sqrt(2.0 / d_in)
        self.w1 = Tensor(std * rng.standard_normal((d_in, hidden)), requires_grad=True, name="head.hidden.weight")
        self.b1 = Tensor(np.zeros(hidden), requires_grad=True, name="head.hidden.bias")
        w2 = 0.01 * rng.standard_normal((hidden, 5))
        b2 = np.zeros(5)
        b2[0] = -np.log((1 - prior) / prior)
        self.w2 = Tensor(w2, requires_grad=True, name="head.out.weight")
        self.b2 = Tensor(b2, requires_grad=True, name="head.out.bias")

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2)}

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """``(..., m, d')`` -> logits ``(..., m)`` and log-offsets ``(..., m, 4)``."""
        h = ops.relu(ops.pointwise_linear(feats, self.w1, self.b1))
        out = ops.pointwise_linear(h, self.w2, self.b2)
        logit, log_off = ops.split_channels(out, [1, 4])
        return ops.reshape(logit, logit.shape[:-1]), log_off


def head_forward(head: Head, phi_bar: Tensor, stride: float = 8.0) -> tuple[np.ndarray, np.ndarray]:
    """Scores in (0, 1) and strictly positive l/t/r/b offsets (pixels) per cell."""
    logit, log_off = head(phi_bar)
    scores = 1.0 / (1.0 + np.exp(-logit.data))
    return scores, stride * np.exp(log_off.data)


def cell_grid(shape: tuple[int, int], stride: int) -> np.ndarray:
    """``(h*w, 3)`` rows of (center x, center y, stride) in row-major order."""
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    return np.stack([(xs.ravel() + 0.5) * stride, (ys.ravel() + 0.5) * stride,
                     np.full(h * w, float(stride))], axis=1)


@dataclass
class Predictions:
    logits: Tensor  # (B, C, M)
    log_offsets: Tensor  # (B, C, M, 4), in units of each cell's stride
    cells: np.ndarray  # (M, 3)

    def boxes(self) -> np.ndarray:
        """Decoded ``(B, C, M, 4)`` boxes as x_min, y_min, x_max, y_max."""
        off = np.exp(self.log_offsets.data) * self.cells[:, 2:3]
        cx, cy = self.cells[:, 0], self.cells[:, 1]
        return np.stack([cx - off[..., 0], cy - off[..., 1], cx + off[..., 2], cy + off[..., 3]], axis=-1)

    def scores(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.logits.data))


class Detector:
    """Backbone + AAF pipeline + shared head over class-specific query features."""

    def __init__(self, config: PipelineConfig, seed: int = 0, levels: int = 1, hidden: int = 32):
        rng = np.random.default_rng(seed)
        self.config = config
        self.backbone = Backbone(rng, levels=levels)
        self.aaf = AAF(config, self.backbone.dim, rng)
        self.head = Head(rng, self.aaf.out_channels, hidden=hidden)

    def parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.backbone.parameters())
        params.update(self.aaf.parameters())
        params.update(self.head.parameters())
        return params

    def encode_support(self, support: np.ndarray) -> list[Tensor]:
        """``(C, K, 32, 32, 3)`` crops -> per-level ``(C, K, n, d)`` maps."""
        c, k = support.shape[:2]
        levels = self.backbone(support.reshape((c * k,) + support.shape[2:]))
        return [ops.reshape(f, (c, k) + f.shape[1:]) for f, _ in levels]

    def __call__(self, images: np.ndarray, support: np.ndarray,
                 support_feats: Optional[list[Tensor]] = None) -> Predictions:
        q_levels = self.backbone(images)
        s_levels = self.encode_support(support) if support_feats is None else support_feats
        logits, offsets, cells = [], [], []
        stride = self.backbone.total_stride
        for (q, shape), s in zip(q_levels, s_levels):
            feats = self.aaf.stacked(q, s)
            lg, off = self.head(feats)
            logits.append(lg)
            offsets.append(off)
            cells.append(cell_grid(shape, stride))
            stride *= 2
        if len(logits) == 1:
            return Predictions(logits[0], offsets[0], cells[0])
        lg = _cat_positions(logits, axis=-1)
        off = _cat_positions(offsets, axis=-2)
        return Predictions(lg, off, np.concatenate(cells))


def _cat_positions(parts: list[Tensor], axis: int) -> Tensor:
    # concat along the position axis by moving it last, reusing concat_channels
    if axis == -1:
        return ops.concat_channels(parts)
    moved = [ops.swap_last(p) for p in parts]
    return ops.swap_last(ops.concat_channels(moved))
