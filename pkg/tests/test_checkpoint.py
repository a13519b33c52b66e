import struct
import zipfile

import numpy as np
import pytest

from pastiche.checkpoint import CheckpointError, load_archive, save_archive


def test_round_trip(tmp_path):
    path = str(tmp_path / "model.ckpt")
    rng = np.random.default_rng(0)
    tensors = {
        "a.weight": rng.normal(size=(3, 4)).astype(np.float32),
        "b.bias": rng.normal(size=(7,)).astype(np.float32),
        "scalarish": np.float32(2.5).reshape(()),
    }
    meta = {"kind": "test", "step": 12}
    save_archive(path, meta, tensors)
    meta2, tensors2 = load_archive(path)
    assert meta2 == meta
    assert set(tensors2) == set(tensors)
    for name in tensors:
        assert np.array_equal(tensors2[name], tensors[name])
        assert tensors2[name].dtype == np.float32


def test_blob_layout_is_shape_prefixed_little_endian(tmp_path):
    path = str(tmp_path / "one.ckpt")
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    save_archive(path, {}, {"w": arr})
    with zipfile.ZipFile(path) as zf:
        blob = zf.read("tensors/w.bin")
    ndim = struct.unpack_from("<I", blob, 0)[0]
    assert ndim == 2
    assert struct.unpack_from("<2I", blob, 4) == (2, 3)
    payload = np.frombuffer(blob[12:], dtype="<f4")
    assert np.array_equal(payload.reshape(2, 3), arr)


def test_truncated_blob_rejected(tmp_path):
    path = str(tmp_path / "bad.ckpt")
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr("meta.json", "{}")
        zf.writestr("tensors/x.bin", struct.pack("<I", 1) + struct.pack("<I", 10))
    with pytest.raises(CheckpointError):
        load_archive(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_archive(str(tmp_path / "absent.ckpt"))


def test_atomic_overwrite(tmp_path):
    path = str(tmp_path / "model.ckpt")
    save_archive(path, {"v": 1}, {"w": np.zeros(2, np.float32)})
    save_archive(path, {"v": 2}, {"w": np.ones(2, np.float32)})
    meta, tensors = load_archive(path)
    assert meta["v"] == 2
    assert tensors["w"].sum() == 2.0
