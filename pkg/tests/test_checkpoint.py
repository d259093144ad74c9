from collections import OrderedDict

import numpy as np
import pytest

from afa_ssr.toy.checkpoint import MAGIC, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint


def sample():
    rng = np.random.default_rng(0)
    params = OrderedDict(
        [
            ("enc1.w", rng.standard_normal((8, 3, 3, 3)).astype(np.float32)),
            ("enc1.b", rng.standard_normal(8).astype(np.float32)),
            ("wide.ü", rng.standard_normal((2, 2)).astype(np.float64)),
        ]
    )
    return Checkpoint(params, epoch=7, seed=2**64 - 1, config_digest=bytes(range(32)))


def test_layout_header():
    blob = sample().to_bytes()
    assert blob[:8] == MAGIC == b"AFACKPT1"
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:16], "little") == 3
    assert int.from_bytes(blob[16:20], "little") == len(b"enc1.w")


def test_round_trip_bit_exact(tmp_path):
    ck = sample()
    path = save_checkpoint(ck, tmp_path / "m.ckpt")
    back = load_checkpoint(path)
    assert list(back.params) == list(ck.params)
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        assert back.params[k].tobytes() == ck.params[k].tobytes()
    assert (back.epoch, back.seed, back.config_digest) == (7, 2**64 - 1, bytes(range(32)))
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_truncation_everywhere():
    blob = sample().to_bytes()
    for cut in range(0, len(blob), 7):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(blob[:cut])


def test_bad_magic_version_and_tag():
    blob = bytearray(sample().to_bytes())
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.from_bytes(b"NOTACKPT" + bytes(blob[8:]))
    v = bytearray(blob)
    v[8] = 2
    with pytest.raises(CheckpointError, match="version"):
        Checkpoint.from_bytes(bytes(v))
    t = bytearray(blob)
    t[20 + len(b"enc1.w")] = 9
    with pytest.raises(CheckpointError, match="dtype tag"):
        Checkpoint.from_bytes(bytes(t))
    with pytest.raises(CheckpointError, match="trailing"):
        Checkpoint.from_bytes(bytes(blob) + b"x")


def test_random_bytes_give_structured_errors():
    rng = np.random.default_rng(1)
    for n in (0, 3, 40, 1000):
        with pytest.raises(CheckpointError):
            Checkpoint.from_bytes(rng.integers(0, 256, n, dtype=np.uint8).tobytes())
    with pytest.raises(CheckpointError):
        Checkpoint.from_bytes(MAGIC + rng.integers(0, 256, 64, dtype=np.uint8).tobytes())


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        Checkpoint(OrderedDict(x=np.zeros(2, dtype=np.int32))).to_bytes()
