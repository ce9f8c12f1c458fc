"""Central finite-difference verification of tape gradients."""

from __future__ import annotations

from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .tensor import GradTape, Tensor


def _analytic(f: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = True
        p.grad = None
    with GradTape() as tape:
        loss = f()
    tape.backward(loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad for p in params]
    for p, rg in zip(params, saved):
        p.grad = None
        p.requires_grad = rg
    tape.reset()
    return grads


def _numeric(f: Callable[[], Tensor], p: Tensor, flat_idx: np.ndarray, eps: float) -> np.ndarray:
    base = p.data
    out = np.empty(len(flat_idx))
    for k, i in enumerate(flat_idx):
        plus = base.copy()
        plus.reshape(-1)[i] += eps
        p.data = plus
        fp = f().item()
        minus = base.copy()
        minus.reshape(-1)[i] -= eps
        p.data = minus
        fm = f().item()
        out[k] = (fp - fm) / (2.0 * eps)
    p.data = base
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def _pick(size: int, max_coords: Optional[int], rng: np.random.Generator) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(rng.choice(size, size=max_coords, replace=False))


def gradcheck(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
              max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Max relative error between tape and central-difference gradients of ``f`` at ``x``.

    The error per coordinate is ``|analytic - numeric| / max(1, |analytic|)``.
    ``max_coords`` limits the check to a random subset of coordinates.
    """
    return gradcheck_params(lambda: f(x), {"x": x}, eps=eps, max_coords=max_coords, seed=seed)["x"]


def gradcheck_params(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
                     max_coords: Optional[int] = None, seed: int = 0) -> dict[str, float]:
    """Per-parameter max relative error for a closure over several tensors."""
    names = list(params)
    tensors = [params[n] for n in names]
    grads = _analytic(f, tensors)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p, g in zip(names, tensors, grads):
        idx = _pick(p.data.size, max_coords, rng)
        num = _numeric(f, p, idx, eps)
        errors[name] = relative_error(g.reshape(-1)[idx], num)
    return errors
