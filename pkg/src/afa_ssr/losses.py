"""Segmentation and boundary losses, including the weighted multi-head composite."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, _record, _softplus_np, _sigmoid_np

__all__ = [
    "IGNORE_INDEX",
    "LossWeights",
    "LossReport",
    "cross_entropy",
    "weighted_bce",
    "composite_segmentation_loss",
    "composite_boundary_loss",
]

IGNORE_INDEX = 255


def cross_entropy(logits: Tensor, labels, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean softmax cross-entropy over the pixels whose label is not ``ignore_index``."""
    labels = np.asarray(labels)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"cross_entropy: labels {labels.shape} do not match logits {logits.shape} (expected N, H, W)")
    valid = labels != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise ValueError("cross_entropy: every pixel is ignored")
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}) or equal {ignore_index}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsumexp
    safe = np.where(valid, labels, 0).astype(np.int64)
    picked = np.take_along_axis(logp, safe[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count
    out = np.array(loss, dtype=x.dtype).reshape(1, 1, 1, 1)

    def _backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[:, None], np.take_along_axis(grad, safe[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] * (g.reshape(()) / count)
        return (grad.astype(x.dtype),)

    return _record("cross_entropy", out, (logits,), _backward)


def weighted_bce(logits: Tensor, targets, pos_weight: float = 10.0) -> Tensor:
    """Mean binary cross-entropy with positives weighted by ``pos_weight``.

    Uses ``-log sigmoid(x) = softplus(-x)`` so large logits never overflow.
    """
    t = np.asarray(targets)
    if t.ndim == 3:
        t = t[:, None]
    if t.shape != logits.shape or logits.shape[1] != 1:
        raise ShapeError(f"weighted_bce: targets {np.shape(targets)} do not match one-channel logits {logits.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("weighted_bce: targets must be 0 or 1")
    t = t.astype(logits.dtype)
    x = logits.data
    per_pixel = pos_weight * t * _softplus_np(-x) + (1 - t) * _softplus_np(x)
    out = np.array(per_pixel.mean(), dtype=x.dtype).reshape(1, 1, 1, 1)
    scale = 1.0 / x.size

    def _backward(g):
        s = _sigmoid_np(x)
        grad = pos_weight * t * (s - 1) + (1 - t) * s
        return ((grad * (g.reshape(()) * scale)).astype(x.dtype),)

    return _record("weighted_bce", out, (logits,), _backward)


@dataclass(frozen=True)
class LossWeights:
    beta_o: float = 0.4
    beta_s: float = 0.05
    beta_d: float = 0.05

    def __post_init__(self):
        for name in ("beta_o", "beta_s", "beta_d"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    """Loss terms as differentiable scalars; ``total`` is the one to backpropagate."""

    primary: Tensor
    aux_fused: Tensor
    per_scale: Tensor
    internal_heads: Tensor
    total: Tensor

    def as_floats(self) -> dict:
        return {k: getattr(self, k).item() for k in ("primary", "aux_fused", "per_scale", "internal_heads", "total")}


def _zero(like: Tensor) -> Tensor:
    return Tensor(np.zeros((1, 1, 1, 1), dtype=like.dtype))


def _aligned(p: Tensor, h: int, w: int) -> Tensor:
    # predictions follow the labels, never the other way round
    if p.shape[2:] == (h, w):
        return p
    return T.bilinear_resize(p, h, w)


def _sum(terms):
    out = None
    for t in terms:
        out = t if out is None else out + t
    return out


def composite_segmentation_loss(
    final: Tensor,
    per_scale: Sequence[Tensor],
    aux_fused: Optional[Tensor],
    internal_heads: Sequence[Tensor],
    labels,
    weights: LossWeights = LossWeights(),
    ignore_index: int = IGNORE_INDEX,
) -> LossReport:
    """``primary + beta_o * aux_fused + beta_s * sum(per_scale) + beta_d * sum(internal_heads)``.

    Every term is a cross-entropy against ``labels``; predictions with a
    different spatial size are bilinearly resized to the labels first.
    Per-scale and internal-head terms are summed, not averaged.
    """
    labels = np.asarray(labels)
    h, w = labels.shape[1:]

    def ce(p):
        return cross_entropy(_aligned(p, h, w), labels, ignore_index)

    primary = ce(final)
    aux = ce(aux_fused) if aux_fused is not None else _zero(final)
    scale_term = _sum(ce(p) for p in per_scale) if per_scale else _zero(final)
    heads = _sum(ce(p) for p in internal_heads) if internal_heads else _zero(final)
    total = primary + weights.beta_o * aux + weights.beta_s * scale_term + weights.beta_d * heads
    return LossReport(primary, aux, scale_term, heads, total)


def composite_boundary_loss(
    final: Tensor,
    internal_heads: Sequence[Tensor],
    targets,
    beta_d: float = 0.05,
    pos_weight: float = 10.0,
) -> LossReport:
    """``primary + beta_d * sum(internal_heads)`` with weighted BCE terms."""
    if beta_d < 0:
        raise ValueError("beta_d must be non-negative")
    t = np.asarray(targets)
    if t.ndim == 3:
        t = t[:, None]
    h, w = t.shape[2:]

    def bce(p):
        return weighted_bce(_aligned(p, h, w), t, pos_weight)

    primary = bce(final)
    heads = _sum(bce(p) for p in internal_heads) if internal_heads else _zero(final)
    total = primary + beta_d * heads
    return LossReport(primary, _zero(final), _zero(final), heads, total)
