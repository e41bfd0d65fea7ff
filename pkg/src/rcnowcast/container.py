"""Raw little-endian float32 array files and the named-tensor checkpoint container.

Array file layout (``.x``, ``.rate``, ``.mask``)::

    bytes 0-7    magic  b"RCNARR\\x00\\x01"
    uint32       format version
    uint32       ndim
    ndim*uint32  shape
    float32[...] data, C order, little-endian

Checkpoint layout (``.ckpt``)::

    bytes 0-7    magic  b"RCNCKPT\\x01"
    uint32       format version
    uint64       header length in bytes
    header       UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "shape", "offset"}]}
    float32[...] concatenated tensor data, little-endian; offsets count from
                 the first data byte
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

ARRAY_MAGIC = b"RCNARR\x00\x01"
CKPT_MAGIC = b"RCNCKPT\x01"
FORMAT_VERSION = 1

_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when an on-disk artifact is corrupt or inconsistent."""

    def __init__(self, path, field: str, detail: str):
        self.path = str(path)
        self.field = field
        super().__init__(f"{path}: bad {field}: {detail}")


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=_LE_F32)
    head = ARRAY_MAGIC + struct.pack("<II", FORMAT_VERSION, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes(order="C")


def write_array(path, arr: np.ndarray) -> None:
    atomic_write_bytes(path, encode_array(arr))


def read_array(path, expected_shape: tuple[int, ...] | None = None) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(path, "header", f"file is {len(raw)} bytes")
    if raw[:8] != ARRAY_MAGIC:
        raise FormatError(path, "magic", repr(raw[:8]))
    version, ndim = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise FormatError(path, "version", f"{version} != {FORMAT_VERSION}")
    if ndim > 16 or len(raw) < 16 + 4 * ndim:
        raise FormatError(path, "ndim", str(ndim))
    shape = struct.unpack_from(f"<{ndim}I", raw, 16)
    start = 16 + 4 * ndim
    n = int(np.prod(shape, dtype=np.int64))
    if len(raw) - start != 4 * n:
        raise FormatError(path, "data", f"expected {4 * n} bytes for shape {shape}, found {len(raw) - start}")
    if expected_shape is not None and tuple(shape) != tuple(expected_shape):
        raise FormatError(path, "shape", f"{tuple(shape)} != manifest {tuple(expected_shape)}")
    return np.frombuffer(raw, dtype=_LE_F32, count=n, offset=start).reshape(shape).astype(np.float32)


def write_checkpoint(path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> None:
    index = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blob = arr.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": dict(meta), "tensors": index}, sort_keys=True).encode("utf-8")
    payload = CKPT_MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(blobs)
    atomic_write_bytes(path, payload)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_bytes()
    if len(raw) < 20:
        raise FormatError(path, "header", f"file is {len(raw)} bytes")
    if raw[:8] != CKPT_MAGIC:
        raise FormatError(path, "magic", repr(raw[:8]))
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise FormatError(path, "version", f"{version} != {FORMAT_VERSION}")
    if 20 + hlen > len(raw):
        raise FormatError(path, "header", "truncated header")
    try:
        header = json.loads(raw[20 : 20 + hlen].decode("utf-8"))
        meta, index = header["meta"], header["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(path, "header", str(exc)) from exc
    data = memoryview(raw)[20 + hlen :]
    tensors = {}
    for entry in index:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape, dtype=np.int64))
        start = entry["offset"]
        if start < 0 or start + 4 * n > len(data):
            raise FormatError(path, f"tensor {entry['name']}", "data truncated")
        arr = np.frombuffer(data, dtype=_LE_F32, count=n, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.astype(np.float32)
    return tensors, meta
