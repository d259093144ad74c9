"""Synthetic shape-segmentation data.

Every image is a noisy grey background with one to four overlapping
rectangles and disks. Each shape has a foreground class, and the
class sets the shape's mean colour. Later shapes cover earlier ones.

Randomness comes from SplitMix64 (Steele, Lea & Flood 2014). Image ``i``
of a dataset with seed ``s`` gets its own stream seeded with the ``i``-th
output of ``SplitMix64(s)``, so any image can be regenerated on its own
and the result does not depend on generation order.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

__all__ = ["SplitMix64", "ToyDataset", "gen_dataset", "boundary_map", "class_palette"]

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """The SplitMix64 generator: a Weyl sequence passed through a 64-bit mixer."""

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK
        return _mix(self.state)

    def uniform(self, low: float = 0.0, high: float = 1.0) -> float:
        return low + (high - low) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, low: int, high: int) -> int:
        """Integer in ``[low, high]``."""
        return low + self.next_u64() % (high - low + 1)

    def block(self, n: int) -> np.ndarray:
        """The next ``n`` outputs as uint64, identical to ``n`` calls of ``next_u64``."""
        steps = np.arange(1, n + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
            z = z ^ (z >> np.uint64(31))
        self.state = (self.state + n * _GAMMA) & _MASK
        return z

    def uniform_block(self, n: int) -> np.ndarray:
        return (self.block(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal_block(self, n: int) -> np.ndarray:
        """Standard normals by Box-Muller."""
        m = (n + 1) // 2
        u = self.uniform_block(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[:m]))
        theta = 2.0 * np.pi * u[m:]
        return np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:n]


def class_palette(num_classes: int) -> np.ndarray:
    """Mean RGB colour per class. Class 0 is the grey background."""
    colors = [(0.5, 0.5, 0.5)]
    for c in range(1, num_classes):
        hue = (c - 1) / max(num_classes - 1, 1)
        colors.append(colorsys.hsv_to_rgb(hue, 0.45, 0.75))
    return np.array(colors)


def boundary_map(labels: np.ndarray) -> np.ndarray:
    """1 where any 4-neighbour has a different class (works on (H, W) or (N, H, W))."""
    lab = np.asarray(labels)
    b = np.zeros(lab.shape, dtype=np.uint8)
    dv = lab[..., 1:, :] != lab[..., :-1, :]
    dh = lab[..., :, 1:] != lab[..., :, :-1]
    b[..., 1:, :] |= dv
    b[..., :-1, :] |= dv
    b[..., :, 1:] |= dh
    b[..., :, :-1] |= dh
    return b


@dataclass
class ToyDataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N, H, W) uint8
    boundaries: np.ndarray  # (N, H, W) uint8

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "ToyDataset":
        return ToyDataset(self.images[idx], self.labels[idx], self.boundaries[idx])


def _render_one(seed: int, size: int, num_classes: int, min_shapes: int, max_shapes: int, noise: float, palette):
    rng = SplitMix64(seed)
    labels = np.zeros((size, size), dtype=np.uint8)
    color = np.empty((3, size, size))
    color[:] = palette[0][:, None, None]
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(rng.randint(min_shapes, max_shapes)):
        cls = rng.randint(1, num_classes - 1)
        cy, cx = rng.uniform(0, size), rng.uniform(0, size)
        extent = rng.uniform(0.09, 0.28) * size
        if rng.next_u64() & 1:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= extent**2
        else:
            aspect = rng.uniform(0.5, 2.0)
            mask = (np.abs(yy - cy) <= extent * aspect**0.5) & (np.abs(xx - cx) <= extent / aspect**0.5)
        jitter = np.array([rng.uniform(-0.06, 0.06) for _ in range(3)])
        labels[mask] = cls
        color[:, mask] = (palette[cls] + jitter)[:, None]
    image = color + noise * rng.normal_block(3 * size * size).reshape(3, size, size)
    return image.astype(np.float32), labels


def gen_dataset(config, split: str = "train") -> ToyDataset:
    """Generate the ``train`` or ``val`` split described by a ToyConfig.

    Validation images continue the per-image index after the training
    images, so the two splits never share an image.
    """
    if split == "train":
        start, count = 0, config.train_size
    elif split == "val":
        start, count = config.train_size, config.val_size
    else:
        raise ValueError(f"unknown split {split!r}")
    palette = class_palette(config.num_classes)
    stream = SplitMix64(config.seed)
    seeds = stream.block(start + count)[start:]
    size = config.image_size
    images = np.empty((count, 3, size, size), dtype=np.float32)
    labels = np.empty((count, size, size), dtype=np.uint8)
    for i, s in enumerate(seeds):
        images[i], labels[i] = _render_one(int(s), size, config.num_classes, config.min_shapes, config.max_shapes, config.noise, palette)
    return ToyDataset(images, labels, boundary_map(labels))
