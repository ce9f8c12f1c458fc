"""Alignment, global attention and fusion operators.

All operators take feature maps laid out as ``(..., positions, channels)``.
``phi`` is always the map being transformed and ``rho`` the map that
conditions it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import ops
from .tensor import ShapeError, Tensor

AFFINITY_KINDS = ("identity", "dot_product", "softmax_dot_product")
ATTENTION_KINDS = ("none", "support_pool_reweight", "background_attenuation", "similarity_reweight")
FUSION_OPS = ("mul", "sub", "add", "id", "cat")
POOL_MODES = ("max", "avg")


@dataclass(frozen=True)
class AffinityKind:
    """How the affinity matrix between two maps is built.

    ``scale`` only applies to ``softmax_dot_product``; ``None`` means
    ``1/sqrt(d)`` resolved from the channel count at run time.
    """

    kind: str = "identity"
    scale: Optional[float] = None

    def __post_init__(self):
        if self.kind not in AFFINITY_KINDS:
            raise ValueError(f"unknown affinity kind {self.kind!r}")
        if self.kind != "softmax_dot_product" and self.scale is not None:
            raise ValueError(f"{self.kind} takes no scale")

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def resolved_scale(self, d: int) -> float:
        return 1.0 / math.sqrt(d) if self.scale is None else self.scale


@dataclass(frozen=True)
class AttentionKind:
    kind: str = "none"
    pool: Optional[str] = None

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.kind!r}")
        if self.kind == "support_pool_reweight":
            if self.pool not in POOL_MODES:
                raise ValueError(f"support_pool_reweight needs pool in {POOL_MODES}, got {self.pool!r}")
        elif self.pool is not None:
            raise ValueError(f"{self.kind} takes no pooling mode")


@dataclass(frozen=True)
class FusionComponent:
    op: str
    learnable: bool = False

    def __post_init__(self):
        if self.op not in FUSION_OPS:
            raise ValueError(f"unknown fusion operator {self.op!r}")

    def width(self, d: int) -> int:
        return 2 * d if self.op == "cat" else d


@dataclass(frozen=True)
class FusionKind:
    """Ordered point-wise components concatenated along channels.

    ``pool`` globally pools the support map and broadcasts it over the query
    grid before the components run, which lifts the equal-extent requirement.
    An empty component list means no fusion: the query map passes through.
    """

    components: tuple = ()
    pool: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        if self.pool not in ("none",) + POOL_MODES:
            raise ValueError(f"unknown fusion pooling {self.pool!r}")

    @property
    def arity(self) -> int:
        return len(self.components)

    def out_channels(self, d: int) -> int:
        if not self.components:
            return d
        return int(np.sum([c.width(d) for c in self.components]))


IDENTITY_AFFINITY = AffinityKind()
NO_ATTENTION = AttentionKind()


def build_affinity(kind: AffinityKind, phi: Tensor, rho: Tensor) -> Tensor:
    """Affinity matrix ``A`` of shape ``(..., m, n)`` between ``phi`` (m positions) and ``rho`` (n)."""
    if phi.shape[-1] != rho.shape[-1]:
        raise ShapeError(f"affinity: channel mismatch {phi.shape} vs {rho.shape}")
    m, n = phi.shape[-2], rho.shape[-2]
    if kind.is_identity:
        if m != n:
            raise ShapeError(f"identity affinity needs equal extents, got m={m}, n={n}")
        return Tensor(np.eye(m))
    sim = ops.matmul(phi, ops.swap_last(rho))
    if kind.kind == "dot_product":
        return sim
    # normalise over the phi-position axis so every column is a convex weight vector
    return ops.softmax(ops.scale(sim, kind.resolved_scale(phi.shape[-1])), axis=-2)


def align(phi: Tensor, rho: Tensor, kind: AffinityKind) -> Tensor:
    """Re-express ``phi`` on ``rho``'s grid: ``A(phi, rho)^T phi``.

    Identity affinity is a pass-through, including when extents differ.
    """
    if phi.shape[-1] != rho.shape[-1]:
        raise ShapeError(f"align: channel mismatch {phi.shape} vs {rho.shape}")
    if kind.is_identity:
        return phi
    a = build_affinity(kind, phi, rho)
    return ops.matmul(ops.swap_last(a), phi)


def _similarity_vector(phi: Tensor, rho: Tensor) -> Tensor:
    sim = ops.matmul(phi, ops.swap_last(rho))
    sim = ops.scale(sim, 1.0 / math.sqrt(phi.shape[-1]))
    weights = ops.softmax(ops.mean(sim, axis=-2, keepdims=True), axis=-1)  # (..., 1, n)
    return ops.matmul(weights, rho)  # (..., 1, d)


def attend(phi: Tensor, rho: Tensor, kind: AttentionKind) -> Tensor:
    """Channel-wise reweighting of ``phi``; the spatial extent of ``phi`` is kept."""
    if phi.shape[-1] != rho.shape[-1]:
        raise ShapeError(f"attend: channel mismatch {phi.shape} vs {rho.shape}")
    if kind.kind == "none":
        return phi
    if kind.kind == "support_pool_reweight":
        return ops.mul(phi, ops.global_pool(rho, kind.pool))
    if kind.kind == "background_attenuation":
        return ops.mul(phi, ops.sigmoid(ops.global_pool(phi, "avg")))
    return ops.mul(phi, _similarity_vector(phi, rho))


@dataclass
class FusionParams:
    """Learnable post-maps, one ``(weight, bias)`` pair per learnable component."""

    maps: dict = field(default_factory=dict)

    @classmethod
    def init(cls, kind: FusionKind, d: int, rng: np.random.Generator, noise: float = 0.01,
             prefix: str = "fusion") -> "FusionParams":
        maps = {}
        for i, comp in enumerate(kind.components):
            if comp.learnable:
                w = comp.width(d)
                maps[i] = (
                    Tensor(np.eye(w) + noise * rng.standard_normal((w, w)), requires_grad=True,
                           name=f"{prefix}.{i}.{comp.op}.weight"),
                    Tensor(np.zeros(w), requires_grad=True, name=f"{prefix}.{i}.{comp.op}.bias"),
                )
        return cls(maps)

    def tensors(self) -> list[Tensor]:
        return [t for i in sorted(self.maps) for t in self.maps[i]]


def _component(op: str, phi: Tensor, rho: Tensor) -> Tensor:
    if op == "mul":
        return ops.mul(phi, rho)
    if op == "sub":
        return ops.sub(phi, rho)
    if op == "add":
        return ops.add(phi, rho)
    if op == "id":
        return phi
    return ops.concat_channels([phi, rho])


def fuse(phi: Tensor, rho: Tensor, kind: FusionKind, params: Optional[FusionParams] = None) -> Tensor:
    """Concatenate the point-wise components of ``(phi, rho)`` along channels."""
    if phi.shape[-1] != rho.shape[-1]:
        raise ShapeError(f"fuse: channel mismatch {phi.shape} vs {rho.shape}")
    if not kind.components:
        return phi
    if kind.pool != "none":
        rho = ops.global_pool(rho, kind.pool)
    if rho.shape[-2] != phi.shape[-2]:
        if rho.shape[-2] != 1 or kind.pool == "none":
            raise ShapeError(
                f"fuse: spatial extents differ (query {phi.shape[-2]}, support {rho.shape[-2]}); "
                "align the support to the query or declare support pooling first"
            )
    target = np.broadcast_shapes(phi.shape, rho.shape)
    if phi.shape != target:
        phi = ops.broadcast_to(phi, target)
    if rho.shape != target:
        rho = ops.broadcast_to(rho, target)
    maps = params.maps if params is not None else {}
    outs = []
    for i, comp in enumerate(kind.components):
        y = _component(comp.op, phi, rho)
        if comp.learnable:
            if i not in maps:
                raise ValueError(f"fusion component {i} ({comp.op}) is learnable but has no parameters")
            w, b = maps[i]
            y = ops.pointwise_linear(y, w, b)
        outs.append(y)
    return ops.concat_channels(outs)
