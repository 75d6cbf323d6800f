"""Raw tensor file format and checkpoint manifest round trips."""

import numpy as np
import pytest

from sgdvit.errors import DataError
from sgdvit.serialize import (
    load_checkpoint,
    load_tensor,
    read_manifest,
    save_checkpoint,
    save_tensor,
    tensor_from_bytes,
    tensor_to_bytes,
)


def test_header_layout():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    blob = tensor_to_bytes(arr)
    assert blob[:4] == b"SGDT"
    assert blob[4] == 1          # version
    assert blob[5] == 0          # f32
    assert blob[6] == 2          # rank
    assert blob[7] == 0          # pad to 8 bytes
    dims = np.frombuffer(blob[8:24], dtype="<u8")
    assert list(dims) == [2, 3]
    assert len(blob) == 24 + 6 * 4


def test_f64_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    arr = rng.normal(size=(3, 4, 5))
    path = tmp_path / "t.sgdt"
    save_tensor(path, arr)
    back = load_tensor(path)
    assert back.dtype == np.float64
    np.testing.assert_array_equal(back, arr)


def test_f32_roundtrip_bit_exact(tmp_path):
    arr = np.random.default_rng(1).normal(size=(7,)).astype(np.float32)
    path = tmp_path / "t.sgdt"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)


def test_bad_magic_rejected():
    with pytest.raises(DataError):
        tensor_from_bytes(b"XXXX" + bytes(20))


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    named = {
        "backbone.conv1.weight": rng.normal(size=(4, 3, 3, 3)).astype(np.float32),
        "sft.encoder.mha.w1.0": rng.normal(size=(8, 4)).astype(np.float32),
        "sft.encoder.mha.wc": rng.normal(size=(8, 8)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, named)
    back = load_checkpoint(path)
    assert list(back) == list(named)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])


def test_manifest_inspection_without_payload(tmp_path):
    named = {"a.weight": np.zeros((2, 2), dtype=np.float32),
             "b.bias": np.ones(3, dtype=np.float64)}
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, named)
    entries = read_manifest(path)
    assert [e.name for e in entries] == ["a.weight", "b.bias"]
    assert entries[0].shape == (2, 2) and entries[0].dtype == "f32"
    assert entries[1].shape == (3,) and entries[1].dtype == "f64"
    assert entries[0].offset == 0 and entries[1].offset > 0


def test_non_checkpoint_rejected(tmp_path):
    path = tmp_path / "junk"
    path.write_bytes(b"hello world\n")
    with pytest.raises(DataError):
        read_manifest(path)
