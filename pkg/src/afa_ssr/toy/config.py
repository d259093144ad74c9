"""Configuration of the synthetic training pipeline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields, replace

from ..ssr import PhiKind, ScaleSet

__all__ = ["ToyConfig", "FUSION_MODES"]

FUSION_MODES = ("afa", "sum", "concat-proj")


@dataclass(frozen=True)
class ToyConfig:
    # data
    image_size: int = 64
    num_classes: int = 4
    min_shapes: int = 1
    max_shapes: int = 4
    noise: float = 0.25
    train_size: int = 512
    val_size: int = 128
    # model
    fusion: str = "afa"
    widths: tuple = (8, 16, 32, 64)
    scales: tuple = (0.5, 1.0)
    phi: str = "abs"
    attn_mid: int = 0  # 0 means max(C // 4, 1)
    reduction: int = 4
    attn_out_scale: float = 0.1  # init scale of each gate's last layer
    # optimisation
    seed: int = 0
    epochs: int = 12
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 16

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "scales", ScaleSet(self.scales).factors)
        object.__setattr__(self, "phi", PhiKind.parse(self.phi).value)
        for name in ("image_size", "num_classes", "train_size", "val_size", "epochs", "batch_size", "reduction"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2 (background plus one shape class)")
        if not 1 <= self.min_shapes <= self.max_shapes:
            raise ValueError(f"need 1 <= min_shapes <= max_shapes, got {self.min_shapes}, {self.max_shapes}")
        if len(self.widths) != 4 or any(w < 1 for w in self.widths):
            raise ValueError(f"widths must be four positive channel counts, got {self.widths}")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8 (the encoder downsamples three times)")
        if self.fusion not in FUSION_MODES:
            raise ValueError(f"fusion must be one of {FUSION_MODES}, got {self.fusion!r}")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.noise < 0 or self.attn_mid < 0 or self.attn_out_scale < 0:
            raise ValueError("lr must be > 0, momentum in [0, 1), noise, attn_mid and attn_out_scale >= 0")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")

    @classmethod
    def field_names(cls) -> list:
        return [f.name for f in fields(cls)]

    def replace(self, **changes) -> "ToyConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["scales"] = list(self.scales)
        return d

    def digest(self) -> bytes:
        """SHA-256 of the canonical JSON form; stored in checkpoints."""
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).digest()
