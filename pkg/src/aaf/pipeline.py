"""Composition of alignment, attention and fusion into class-specific query features."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .operators import (
    IDENTITY_AFFINITY,
    NO_ATTENTION,
    AffinityKind,
    AttentionKind,
    FusionComponent,
    FusionKind,
    FusionParams,
    align,
    attend,
    fuse,
)
from .tensor import ShapeError, Tensor

ORDERS = ("align_then_attend", "attend_then_align")
AGGREGATIONS = ("mean_features", "mean_outputs")


@dataclass(frozen=True)
class PipelineConfig:
    """One AAF composition.

    ``align_query`` re-expresses the query on the support grid and
    ``align_support`` the support on the query grid; likewise for the
    attention pair. ``lines`` records source line numbers when the config
    came from text and is ignored by equality.
    """

    order: str = "align_then_attend"
    align_query: AffinityKind = IDENTITY_AFFINITY
    align_support: AffinityKind = IDENTITY_AFFINITY
    attend_query: AttentionKind = NO_ATTENTION
    attend_support: AttentionKind = NO_ATTENTION
    fusion: FusionKind = FusionKind()
    shots_aggregation: str = "mean_features"
    lines: Mapping[str, int] = field(default_factory=dict, compare=False, repr=False, hash=False)

    def __post_init__(self):
        if self.order not in ORDERS:
            raise ValueError(f"unknown order {self.order!r}")
        if self.shots_aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown shots aggregation {self.shots_aggregation!r}")

    @property
    def alignment(self) -> tuple[AffinityKind, AffinityKind]:
        return self.align_query, self.align_support

    @property
    def attention(self) -> tuple[AttentionKind, AttentionKind]:
        return self.attend_query, self.attend_support

    def out_channels(self, d: int) -> int:
        return self.fusion.out_channels(d)


def preset(name: str) -> PipelineConfig:
    """Configurations standing in for FRW, DANA, Meta Faster R-CNN and DRL.

    ``mfrcn_lite`` applies its similarity reweighting before the learnable
    fusion maps, and omits RoI pooling.
    """
    if name == "frw":
        return PipelineConfig(attend_query=AttentionKind("support_pool_reweight", "max"))
    if name == "dana_lite":
        return PipelineConfig(
            order="attend_then_align",
            attend_support=AttentionKind("background_attenuation"),
            align_support=AffinityKind("softmax_dot_product"),
            fusion=FusionKind((FusionComponent("cat"),)),
        )
    if name == "mfrcn_lite":
        return PipelineConfig(
            align_support=AffinityKind("softmax_dot_product"),
            attend_query=AttentionKind("similarity_reweight"),
            attend_support=AttentionKind("similarity_reweight"),
            fusion=FusionKind((FusionComponent("sub", True), FusionComponent("cat", True))),
        )
    if name == "drl":
        return PipelineConfig(
            fusion=FusionKind(
                (FusionComponent("mul"), FusionComponent("sub"), FusionComponent("id")), pool="avg"
            )
        )
    raise KeyError(f"unknown preset {name!r}; expected one of {PRESETS}")


PRESETS = ("frw", "dana_lite", "mfrcn_lite", "drl")


def _step(config: PipelineConfig, q: Tensor, s: Tensor, stage: str) -> tuple[Tensor, Tensor]:
    if stage == "align":
        return align(q, s, config.align_query), align(s, q, config.align_support)
    return attend(q, s, config.attend_query), attend(s, q, config.attend_support)


def aaf_stacked(config: PipelineConfig, phi_q: Tensor, support: Tensor,
                params: Optional[FusionParams] = None) -> Tensor:
    """Vectorised forward pass.

    ``phi_q`` is ``(B, m, d)`` and ``support`` is ``(C, K, n, d)``; the result
    is ``(B, C, m, d')`` with one class-specific map per query and class.
    """
    if phi_q.ndim != 3 or support.ndim != 4:
        raise ShapeError(f"aaf_stacked expects (B,m,d) and (C,K,n,d), got {phi_q.shape}, {support.shape}")
    b, m, d = phi_q.shape
    c, k, n, d2 = support.shape
    if d != d2:
        raise ShapeError(f"query has {d} channels, support has {d2}")
    q = ops.reshape(phi_q, (b, 1, 1, m, d))
    s = ops.reshape(support, (1, c, k, n, d))
    stages = ("align", "attend") if config.order == "align_then_attend" else ("attend", "align")
    for stage in stages:
        q, s = _step(config, q, s, stage)
    if q.shape[-2] != m:
        raise ShapeError(
            f"query was re-expressed on a {q.shape[-2]}-position grid; output must keep the "
            f"query's {m} positions"
        )
    if config.shots_aggregation == "mean_features":
        q = ops.mean(q, axis=2, keepdims=True)
        s = ops.mean(s, axis=2, keepdims=True)
        out = fuse(q, s, config.fusion, params)
    else:
        out = ops.mean(fuse(q, s, config.fusion, params), axis=2, keepdims=True)
    d_out = out.shape[-1]
    target = (b, c, 1, m, d_out)
    if out.shape != target:
        out = ops.broadcast_to(out, target)
    return ops.reshape(out, (b, c, m, d_out))


class AAF:
    """AAF module: a config plus the learnable fusion post-maps it needs."""

    def __init__(self, config: PipelineConfig, d: int, rng: Optional[np.random.Generator] = None,
                 noise: float = 0.01):
        self.config = config
        self.d = d
        rng = np.random.default_rng(0) if rng is None else rng
        self.fusion_params = FusionParams.init(config.fusion, d, rng, noise=noise)

    @property
    def out_channels(self) -> int:
        return self.config.out_channels(self.d)

    def parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.fusion_params.tensors()}

    def stacked(self, phi_q: Tensor, support: Tensor) -> Tensor:
        return aaf_stacked(self.config, phi_q, support, self.fusion_params)

    def __call__(self, phi_q: Tensor, supports: Mapping[Hashable, Sequence[Tensor]]) -> dict:
        return aaf_forward(self.config, phi_q, supports, self.fusion_params)


def aaf_forward(config: PipelineConfig, phi_q: Tensor, supports: Mapping[Hashable, Sequence[Tensor]],
                params: Optional[FusionParams] = None) -> dict:
    """Class-specific query maps ``{class: (m, d')}`` for a single ``(m, d)`` query map.

    Each class's K support maps are aggregated per ``config.shots_aggregation``.
    """
    if phi_q.ndim != 2:
        raise ShapeError(f"query feature map must be (positions, channels), got {phi_q.shape}")
    if not supports:
        raise ShapeError("at least one class of support maps is required")
    m, d = phi_q.shape
    q = ops.reshape(phi_q, (1, m, d))
    out = {}
    for cls, shots in supports.items():
        shots = list(shots)
        if not shots:
            raise ShapeError(f"class {cls!r}: K must be >= 1")
        for i, s in enumerate(shots):
            if s.ndim != 2 or s.shape[-1] != d:
                raise ShapeError(f"class {cls!r}, shot {i}: support shape {s.shape} vs query {phi_q.shape}")
            if s.shape != shots[0].shape:
                raise ShapeError(f"class {cls!r}, shot {i}: shape {s.shape} differs from shot 0 {shots[0].shape}")
        stacked = ops.reshape(ops.stack(shots, axis=0), (1, len(shots)) + shots[0].shape)
        try:
            res = aaf_stacked(config, q, stacked, params)
        except ShapeError as exc:
            raise ShapeError(f"class {cls!r}: {exc}") from exc
        out[cls] = ops.reshape(res, (m, res.shape[-1]))
    return out


def multiscale_forward(config: PipelineConfig, levels: Sequence[tuple[Tensor, Mapping]],
                       params: Optional[FusionParams] = None) -> list[dict]:
    """Run :func:`aaf_forward` on every pyramid level with shared parameters."""
    outs = []
    for i, (phi_q, supports) in enumerate(levels):
        try:
            outs.append(aaf_forward(config, phi_q, supports, params))
        except ShapeError as exc:
            raise ShapeError(f"level {i}: {exc}") from exc
    return outs
