"""Alignment, attention and fusion on toy feature maps.

Feature maps are laid out as (positions, channels). Run with
``python demos/01_operators.py``.
"""

import numpy as np

from aaf import (
    AAF,
    PRESETS,
    AffinityKind,
    AttentionKind,
    FusionComponent,
    FusionKind,
    PipelineConfig,
    Tensor,
    align,
    attend,
    build_affinity,
    fuse,
    preset,
)

rng = np.random.default_rng(0)
query = Tensor(rng.normal(size=(6, 4)))    # a 2x3 query map with 4 channels
support = Tensor(rng.normal(size=(3, 4)))  # a 3-position support map

# affinity between query and support positions, softmax over the query axis
A = build_affinity(AffinityKind("softmax_dot_product"), query, support)
print("affinity", A.shape, "columns sum to", np.round(A.data.sum(axis=0), 12))

# aligning the query onto the support grid: every output is a convex mix of query rows
aligned = align(query, support, AffinityKind("softmax_dot_product"))
print("aligned query", aligned.shape)
print("inside the per-channel range:",
      bool(np.all(aligned.data >= query.data.min(0)) and np.all(aligned.data <= query.data.max(0))))

# attention reweights channels but keeps the map's own grid
reweighted = attend(query, support, AttentionKind("support_pool_reweight", "max"))
print("reweighted", reweighted.shape)

# fusion needs matching grids unless the support is pooled first
kind = FusionKind((FusionComponent("mul"), FusionComponent("sub"), FusionComponent("id")), pool="avg")
fused = fuse(query, support, kind)
print("fused", fused.shape, "=", kind.out_channels(4), "channels")

# the four presets, applied per class and averaged over shots
shots = {c: [Tensor(rng.normal(size=(6, 4))) for _ in range(3)] for c in ("cat", "dog")}
for name in PRESETS:
    model = AAF(preset(name), 4, rng)
    out = model(query, shots)
    print(f"{name:11s} -> {[tuple(v.shape) for v in out.values()]}")

# the all-identity configuration hands the query back untouched
same = AAF(PipelineConfig(), 4, rng)(query, shots)["cat"]
print("identity config exact:", np.array_equal(same.data, query.data))
