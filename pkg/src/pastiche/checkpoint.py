"""Checkpoint archives: JSON metadata plus named raw float32 tensor blobs.

An archive is a single zip file holding ``meta.json`` and one
``tensors/<name>.bin`` entry per tensor. Each blob is shape-prefixed:
a little-endian uint32 rank, the uint32 dimensions, then the float32
payload, all little-endian. Writes go through a temp file and an atomic
rename so a crashed run never leaves a truncated checkpoint behind.
"""

from __future__ import annotations

import json
import os
import struct
import zipfile

import numpy as np

__all__ = ["CheckpointError", "save_archive", "load_archive"]


class CheckpointError(RuntimeError):
    """Malformed or unreadable checkpoint archive."""


def _encode_tensor(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype="<f4")  # asarray keeps 0-d tensors 0-d
    if arr.ndim and not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    header = struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def _decode_tensor(blob: bytes, name: str) -> np.ndarray:
    if len(blob) < 4:
        raise CheckpointError(f"tensor {name!r}: truncated header")
    (ndim,) = struct.unpack_from("<I", blob, 0)
    if ndim > 8:
        raise CheckpointError(f"tensor {name!r}: implausible rank {ndim}")
    offset = 4 + 4 * ndim
    if len(blob) < offset:
        raise CheckpointError(f"tensor {name!r}: truncated shape")
    shape = struct.unpack_from(f"<{ndim}I", blob, 4)
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = blob[offset:]
    if len(payload) != 4 * count:
        raise CheckpointError(
            f"tensor {name!r}: payload {len(payload)} bytes, expected {4 * count}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(shape)
    return arr.astype(np.float32, copy=True)


def save_archive(path: str, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write metadata and tensors atomically (temp file + rename)."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    tmp = path + ".tmp"
    try:
        with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
            zf.writestr("meta.json", json.dumps(meta, indent=1, sort_keys=True))
            for name in sorted(tensors):
                zf.writestr(f"tensors/{name}.bin", _encode_tensor(tensors[name]))
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def load_archive(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            meta = json.loads(zf.read("meta.json"))
            tensors: dict[str, np.ndarray] = {}
            for info in zf.infolist():
                if info.filename.startswith("tensors/") and info.filename.endswith(".bin"):
                    name = info.filename[len("tensors/") : -len(".bin")]
                    tensors[name] = _decode_tensor(zf.read(info), name)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    return meta, tensors
