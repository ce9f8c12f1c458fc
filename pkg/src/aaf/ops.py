"""Differentiable operators over :class:`~aaf.tensor.Tensor`.

Feature maps follow the ``(..., positions, channels)`` layout: the last axis
holds channels, the one before it spatial positions, and any leading axes
are batch dimensions that broadcast like numpy.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, record


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# -- elementwise -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    return record(
        ad / bd,
        (a, b),
        lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * ad / (bd * bd), b.shape)),
    )


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` by name."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(a, b)


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * c, (a,), lambda g: (g * c,))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties route the gradient to ``a``."""
    _broadcast_shape(a, b, "minimum")
    take_a = a.data <= b.data
    return record(
        np.where(take_a, a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return record(np.log(x), (a,), lambda g: (g / x,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record(a.data * mask, (a,), lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# -- reductions and reshaping -----------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    orig = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    return record(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def swap_last(a: Tensor) -> Tensor:
    """Transpose the last two axes."""
    if a.ndim < 2:
        raise ShapeError(f"swap_last needs rank >= 2, got shape {a.shape}")
    return record(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),))


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("stack needs at least one tensor")
    shapes = {p.shape for p in parts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: all shapes must match, got {sorted(shapes)}")
    out = np.stack([p.data for p in parts], axis=axis)

    def bwd(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(parts)))

    return record(out, parts, bwd)


def take(a: Tensor, index: int, axis: int = 0) -> Tensor:
    """Select one slice along ``axis`` (the axis is dropped)."""
    shape = a.shape
    ax = axis % a.ndim

    def bwd(g):
        full = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[ax] = index
        full[tuple(sl)] = g
        return (full,)

    return record(np.take(a.data, index, axis=ax), (a,), bwd)


# -- feature-map ops ----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(ad @ bd, (a, b), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), bwd)


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    parts = list(parts)
    if not parts:
        raise ShapeError("concat_channels needs at least one part")
    lead = parts[0].shape[:-1]
    for p in parts[1:]:
        if p.shape[:-1] != lead:
            raise ShapeError(
                f"concat_channels: spatial extents differ: {parts[0].shape} vs {p.shape}"
            )
    if len(parts) == 1:
        return parts[0]
    widths = [p.shape[-1] for p in parts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([p.data for p in parts], axis=-1)
    return record(out, parts, lambda g: tuple(np.split(g, cuts, axis=-1)))


def split_channels(a: Tensor, widths: Sequence[int]) -> list[Tensor]:
    if np.sum(widths) != a.shape[-1]:
        raise ShapeError(f"split_channels: widths {list(widths)} do not sum to {a.shape[-1]}")
    out = []
    start = 0
    for w in widths:
        lo, hi = start, start + w

        def bwd(g, lo=lo, hi=hi):
            full = np.zeros(a.shape)
            full[..., lo:hi] = g
            return (full,)

        out.append(record(a.data[..., lo:hi].copy(), (a,), bwd))
        start = hi
    return out


def global_pool(a: Tensor, mode: str = "max") -> Tensor:
    """Pool over the position axis, keeping it with extent 1.

    Max-pool gradients go to the first maximising position.
    """
    if a.ndim < 2:
        raise ShapeError(f"global_pool needs a (positions, channels) map, got shape {a.shape}")
    if mode == "avg":
        return mean(a, axis=-2, keepdims=True)
    if mode != "max":
        raise ValueError(f"unknown pooling mode {mode!r}")
    idx = np.argmax(a.data, axis=-2)[..., None, :]
    out = np.take_along_axis(a.data, idx, axis=-2)

    def bwd(g):
        full = np.zeros(a.shape)
        np.put_along_axis(full, idx, g, axis=-2)
        return (full,)

    return record(out, (a,), bwd)


def pointwise_linear(a: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-position linear map (a 1x1 convolution): ``a @ W + b``."""
    if weight.ndim != 2 or weight.shape[0] != a.shape[-1]:
        raise ShapeError(
            f"pointwise_linear: input has {a.shape[-1]} channels, weight is {weight.shape}"
        )
    out = matmul(a, weight)
    if bias is not None:
        if bias.shape[-1] != weight.shape[1]:
            raise ShapeError(f"pointwise_linear: bias {bias.shape} vs weight {weight.shape}")
        out = add(out, bias)
    return out


# -- convolution --------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2-D convolution on NHWC input with ``(kh, kw, cin, cout)`` weights."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = weight.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels, weight expects {cin}")
    n, h, w, _ = x.shape
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {xp.shape[1:3]}")
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    # win: (n, ho, wo, cin, kh, kw) -> cols: (n*ho*wo, kh*kw*cin)
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = (cols @ wmat).reshape(n, ho, wo, cout)
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(n * ho * wo, cout)
        gw = (cols.T @ g2).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, padding:padding + h, padding:padding + w, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return record(out, inputs, bwd)


# -- fused losses -------------------------------------------------------------


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                       gamma: float = 2.0) -> Tensor:
    """Summed binary focal loss over all elements of ``logits``.

    ``targets`` is a constant array of 0/1 labels with the logits' shape.
    """
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    if t.shape != x.shape:
        raise ShapeError(f"focal loss: targets {t.shape} vs logits {x.shape}")
    p = _sigmoid(x)
    # log(p) and log(1-p) via softplus for stability
    log_p = -np.logaddexp(0.0, -x)
    log_1mp = -np.logaddexp(0.0, x)
    pos = alpha * (1.0 - p) ** gamma * log_p
    neg = (1.0 - alpha) * p ** gamma * log_1mp
    loss = -(t * pos + (1.0 - t) * neg)

    def bwd(g):
        dpos = alpha * (-gamma * (1.0 - p) ** (gamma - 1.0) * p * (1.0 - p) * log_p
                        + (1.0 - p) ** gamma * (1.0 - p))
        dneg = (1.0 - alpha) * (gamma * p ** (gamma - 1.0) * p * (1.0 - p) * log_1mp
                                - p ** gamma * p)
        return (-g * (t * dpos + (1.0 - t) * dneg),)

    return record(np.asarray(loss.sum()), (logits,), bwd)
