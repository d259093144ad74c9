"""Versioned binary checkpoints.

Layout (little-endian)::

    b"AFACKPT1"
    u32 version, u32 entry count
    per entry: u32 name length, UTF-8 name, u8 dtype tag, u8 rank,
               u32 dims[rank], raw values
    u32 epoch, u64 seed, 32-byte config digest

dtype tag 0 is float32 and 1 is float64.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "Checkpoint", "save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]

MAGIC = b"AFACKPT1"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated or from an unsupported version."""


@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    epoch: int = 0
    seed: int = 0
    config_digest: bytes = bytes(32)
    version: int = VERSION

    def to_bytes(self) -> bytes:
        if len(self.config_digest) != 32:
            raise CheckpointError("config digest must be 32 bytes")
        parts = [MAGIC, struct.pack("<II", self.version, len(self.params))]
        for name, arr in self.params.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise CheckpointError(f"parameter {name}: unsupported dtype {arr.dtype}")
            tag = _TAGS[arr.dtype]
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)) + raw)
            parts.append(struct.pack("<BB", tag, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
        parts.append(struct.pack("<IQ", self.epoch, self.seed) + bytes(self.config_digest))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        reader = _Reader(blob)
        if reader.take(len(MAGIC), "magic") != MAGIC:
            raise CheckpointError("bad magic: not an AFACKPT1 checkpoint")
        version, count = reader.unpack("<II", "header")
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        params = OrderedDict()
        for i in range(count):
            (name_len,) = reader.unpack("<I", f"entry {i} name length")
            try:
                name = reader.take(name_len, f"entry {i} name").decode("utf-8")
            except UnicodeDecodeError as exc:
                raise CheckpointError(f"entry {i}: name is not valid UTF-8") from exc
            tag, rank = reader.unpack("<BB", f"entry {name} dtype/rank")
            if tag not in _DTYPES:
                raise CheckpointError(f"entry {name}: unknown dtype tag {tag}")
            dims = reader.unpack(f"<{rank}I", f"entry {name} dims")
            dtype = _DTYPES[tag]
            n = int(np.prod(dims, dtype=np.int64))
            raw = reader.take(n * dtype.itemsize, f"entry {name} values")
            params[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        epoch, seed = reader.unpack("<IQ", "trailer")
        digest = reader.take(32, "config digest")
        if reader.remaining():
            raise CheckpointError(f"{reader.remaining()} unexpected trailing bytes")
        return cls(params, epoch, seed, digest, version)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = memoryview(blob)
        self.pos = 0

    def remaining(self) -> int:
        return len(self.blob) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if n > self.remaining():
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        out = bytes(self.blob[self.pos : self.pos + n])
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(ckpt.to_bytes())
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return Checkpoint.from_bytes(blob)
