"""Binary checkpoint format: round trips, validation, canonical config."""

import numpy as np
import pytest

from raftlab.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint
from raftlab.errors import DataError


def sample_checkpoint():
    rng = np.random.default_rng(3)
    return Checkpoint(
        config={"kind": "demo", "encoder": {"d_model": 8}, "vocab": ["<pad>", "<unk>", "<cls>", "a"]},
        params={
            "emb.tok": rng.normal(size=(4, 8)).astype(np.float32),
            "cls.w": rng.normal(size=(8, 2)).astype(np.float32),
            "cls.b": np.zeros(2, dtype=np.float32),
        },
    )


def test_round_trip_is_bit_exact(tmp_path):
    ckpt = sample_checkpoint()
    path = ckpt.save(tmp_path / "model.ckpt")
    loaded = Checkpoint.load(path)
    assert loaded.config == ckpt.config
    assert set(loaded.params) == set(ckpt.params)
    for name in ckpt.params:
        assert np.array_equal(loaded.params[name], ckpt.params[name])
    assert loaded.to_bytes() == path.read_bytes()


def test_header_layout():
    blob = sample_checkpoint().to_bytes()
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:6], "little") == FORMAT_VERSION


def test_bad_magic_rejected():
    blob = b"NOPE" + sample_checkpoint().to_bytes()[4:]
    with pytest.raises(DataError):
        Checkpoint.from_bytes(blob)


def test_truncated_file_rejected():
    blob = sample_checkpoint().to_bytes()
    with pytest.raises(DataError):
        Checkpoint.from_bytes(blob[: len(blob) // 2])


def test_trailing_bytes_rejected():
    blob = sample_checkpoint().to_bytes() + b"\x00"
    with pytest.raises(DataError):
        Checkpoint.from_bytes(blob)


def test_config_key_order_is_canonical():
    a = Checkpoint(config={"b": 1, "a": 2}, params={})
    b = Checkpoint(config={"a": 2, "b": 1}, params={})
    assert a.to_bytes() == b.to_bytes()


def test_sha256_stable():
    assert sample_checkpoint().sha256() == sample_checkpoint().sha256()


def test_tensors_view():
    ckpt = sample_checkpoint()
    tensors = ckpt.tensors(requires_grad=True, dtype=np.float64)
    assert tensors["cls.w"].requires_grad
    assert tensors["cls.w"].data.dtype == np.float64
    assert np.allclose(tensors["cls.w"].data, ckpt.params["cls.w"])
