"""Attentive feature aggregation.

Spatial attention gates pixels of a shallow feature, channel attention
gates channels of a deep one, and the two are blended with complementary
weights. The multi-input variant composites features back to front, the
way a renderer composites semi-transparent layers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "SpatialAttentionParams",
    "ChannelAttentionParams",
    "spatial_attention",
    "channel_attention",
    "binary_fuse",
    "combined_attention",
    "multi_fuse",
]


def _param(arr, dtype, name):
    return Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)


def _he(rng, shape, dtype, gain=1.0):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * (gain * np.sqrt(2.0 / fan_in))


@dataclass
class SpatialAttentionParams:
    """Weights of the spatial attention block: 3x3 conv, ReLU, 3x3 conv to one channel."""

    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor

    @property
    def channels(self) -> int:
        return self.conv1_w.shape[1]

    @property
    def mid_channels(self) -> int:
        return self.conv1_w.shape[0]

    def __post_init__(self):
        if self.conv2_w.shape[0] != 1:
            raise ShapeError(f"spatial attention must output one channel, conv2 has {self.conv2_w.shape[0]}")
        if self.conv2_w.shape[1] != self.conv1_w.shape[0]:
            raise ShapeError("spatial attention: conv2 input channels must equal conv1 output channels")

    @classmethod
    def create(cls, channels: int, mid_channels: Optional[int] = None, rng=None, dtype=np.float32, name: str = "sa", out_scale: float = 0.01):
        """He-initialised first conv; the last conv is scaled by ``out_scale`` so the gate starts near 0.5."""
        rng = np.random.default_rng(0) if rng is None else rng
        mid = max(channels // 4, 1) if mid_channels is None else mid_channels
        return cls(
            _param(_he(rng, (mid, channels, 3, 3), dtype), dtype, f"{name}.conv1.w"),
            _param(np.zeros(mid), dtype, f"{name}.conv1.b"),
            _param(_he(rng, (1, mid, 3, 3), dtype) * out_scale, dtype, f"{name}.conv2.w"),
            _param(np.zeros(1), dtype, f"{name}.conv2.b"),
        )

    def parameters(self) -> List[Tensor]:
        return [self.conv1_w, self.conv1_b, self.conv2_w, self.conv2_b]


@dataclass
class ChannelAttentionParams:
    """Weights of the channel attention bottleneck (two 1x1 convs, shared by both pooled branches)."""

    fc1_w: Tensor
    fc1_b: Tensor
    fc2_w: Tensor
    fc2_b: Tensor

    @property
    def channels(self) -> int:
        return self.fc1_w.shape[1]

    def __post_init__(self):
        if self.fc2_w.shape[0] != self.fc1_w.shape[1]:
            raise ShapeError("channel attention: fc2 must restore the input channel count")

    @classmethod
    def create(cls, channels: int, reduction: int = 4, rng=None, dtype=np.float32, name: str = "ca", out_scale: float = 0.01):
        if reduction < 1:
            raise ValueError(f"reduction ratio must be >= 1, got {reduction}")
        rng = np.random.default_rng(0) if rng is None else rng
        hidden = max(channels // reduction, 1)
        return cls(
            _param(_he(rng, (hidden, channels, 1, 1), dtype), dtype, f"{name}.fc1.w"),
            _param(np.zeros(hidden), dtype, f"{name}.fc1.b"),
            _param(_he(rng, (channels, hidden, 1, 1), dtype) * out_scale, dtype, f"{name}.fc2.w"),
            _param(np.zeros(channels), dtype, f"{name}.fc2.b"),
        )

    def parameters(self) -> List[Tensor]:
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]


def spatial_attention_logits(f: Tensor, params: SpatialAttentionParams) -> Tensor:
    if f.shape[1] != params.channels:
        raise ShapeError(f"spatial attention expects C={params.channels} channels, got {f.shape[1]}")
    h = T.relu(T.conv2d(f, params.conv1_w, params.conv1_b, padding=1))
    return T.conv2d(h, params.conv2_w, params.conv2_b, padding=1)


def spatial_attention(f: Tensor, params: SpatialAttentionParams) -> Tensor:
    """Per-pixel gate of shape (N, 1, H, W)."""
    return T.sigmoid(spatial_attention_logits(f, params))


def _bottleneck(v: Tensor, params: ChannelAttentionParams) -> Tensor:
    h = T.relu(T.conv2d(v, params.fc1_w, params.fc1_b))
    return T.conv2d(h, params.fc2_w, params.fc2_b)


def channel_attention_logits(f: Tensor, params: ChannelAttentionParams) -> Tensor:
    if f.shape[1] != params.channels:
        raise ShapeError(f"channel attention expects C={params.channels} channels, got {f.shape[1]}")
    return _bottleneck(T.global_avg_pool(f), params) + _bottleneck(T.global_max_pool(f), params)


def channel_attention(f: Tensor, params: ChannelAttentionParams) -> Tensor:
    """Per-channel gate of shape (N, C, 1, 1)."""
    return T.sigmoid(channel_attention_logits(f, params))


def binary_fuse(
    f_s: Tensor,
    f_d: Tensor,
    sp: SpatialAttentionParams,
    cp: ChannelAttentionParams,
    return_attention: bool = False,
):
    """Blend a shallow feature ``f_s`` with a deeper feature ``f_d``.

    The spatial gate comes from ``f_s`` only, the channel gate from ``f_d``
    only; the operation is deliberately asymmetric. With
    ``return_attention`` the pair ``(a_s, a_c)`` is returned as well.
    """
    if f_s.shape != f_d.shape:
        raise ShapeError(f"binary_fuse: shallow feature {f_s.shape} and deep feature {f_d.shape} differ")
    a_s = spatial_attention(f_s, sp)
    a_c = channel_attention(f_d, cp)
    out = a_s * (1.0 - a_c) * f_s + (1.0 - a_s) * a_c * f_d
    if return_attention:
        return out, (a_s, a_c)
    return out


def combined_attention(f: Tensor, sp: SpatialAttentionParams, cp: ChannelAttentionParams) -> Tensor:
    return spatial_attention(f, sp) * channel_attention(f, cp)


def multi_fuse(
    features: Sequence[Tensor],
    params: Sequence[Tuple[SpatialAttentionParams, ChannelAttentionParams]],
    return_attention: bool = False,
):
    """Composite ``k`` same-shape features from ``features[0]`` to ``features[-1]``.

    The caller orders features by how many aggregations produced them:
    the most aggregated feature goes last and is composited on top. The
    result equals ``sum_i a_i * F_i * prod_{j>i} (1 - a_j)``; it is
    evaluated as the running blend ``acc <- (1 - a_i) * acc + a_i * F_i``.
    """
    if not features:
        raise ShapeError("multi_fuse: at least one feature is required")
    if len(params) != len(features):
        raise ShapeError(f"multi_fuse: {len(features)} features but {len(params)} attention parameter sets")
    ref = features[0].shape
    for i, f in enumerate(features):
        if f.shape != ref:
            raise ShapeError(f"multi_fuse: feature {i} has shape {f.shape}, expected {ref}")
    out = None
    spatial_maps = []
    attentions = []
    for f, (sp, cp) in zip(features, params):
        a_s = spatial_attention(f, sp)
        a = a_s * channel_attention(f, cp)
        spatial_maps.append(a_s)
        attentions.append(a)
        term = a * f
        out = term if out is None else (1.0 - a) * out + term
    if return_attention:
        return out, attentions, spatial_maps
    return out
