"""Alignment-Attention-Fusion operators for attention-based few-shot detection."""

from .config import ConfigError, check_shapes, parse, print_config
from .gradcheck import gradcheck, gradcheck_params
from .operators import (
    AffinityKind,
    AttentionKind,
    FusionComponent,
    FusionKind,
    align,
    attend,
    build_affinity,
    fuse,
)
from .pipeline import AAF, PRESETS, PipelineConfig, aaf_forward, multiscale_forward, preset
from .tensor import GradTape, ShapeError, TapeError, Tensor, backward, sgd_step

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "check_shapes",
    "parse",
    "print_config",
    "gradcheck",
    "gradcheck_params",
    "AffinityKind",
    "AttentionKind",
    "FusionComponent",
    "FusionKind",
    "align",
    "attend",
    "build_affinity",
    "fuse",
    "AAF",
    "PRESETS",
    "PipelineConfig",
    "aaf_forward",
    "multiscale_forward",
    "preset",
    "GradTape",
    "ShapeError",
    "TapeError",
    "Tensor",
    "backward",
    "sgd_step",
]
