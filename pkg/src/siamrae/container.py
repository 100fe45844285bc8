"""Tensor container used for model checkpoints and reference pools.

Layout (little-endian throughout)::

    b"SRCK" | u32 version | u32 header length | header (UTF-8 JSON, sorted keys)
    u32 tensor count
    per tensor: u32 name length | name | u8 dtype code | u32 ndim | u32 dims... | raw data

dtype code 0 is float32, 1 is float64. Model parameters are always written as
float32; the writer is deterministic so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError

MAGIC = b"SRCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def dumps(header: dict, tensors: dict[str, np.ndarray], dtypes: dict[str, str] | None = None) -> bytes:
    dtypes = dtypes or {}
    header = {"toolkit_version": __version__, **header}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        dt = np.dtype(dtypes.get(name, "<f4")).newbyteorder("<")
        data = np.ascontiguousarray(arr, dtype=dt)
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)) + key)
        parts.append(struct.pack("<BI", _CODES[dt], data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    buf = memoryview(blob)
    if bytes(buf[:4]) != MAGIC:
        raise DataError("not a siamrae container")
    version, hlen = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise DataError(f"unsupported container version {version}")
    off = 12
    header = json.loads(bytes(buf[off : off + hlen]).decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = bytes(buf[off : off + n]).decode("utf-8")
        off += n
        code, ndim = struct.unpack_from("<BI", buf, off)
        off += 5
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        dt = _DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(buf[off : off + size], dtype=dt).reshape(shape).copy()
        off += size
    return header, tensors


def save(path: str | Path, header: dict, tensors: dict[str, np.ndarray], dtypes: dict[str, str] | None = None) -> None:
    Path(path).write_bytes(dumps(header, tensors, dtypes))


def load(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    return loads(blob)
