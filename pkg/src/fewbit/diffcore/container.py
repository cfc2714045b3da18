"""FCMP: flat little-endian container for named arrays plus a JSON header.

Layout::

    magic      4 bytes   b"FCMP"
    version    u16       1
    meta_len   u32       length of the UTF-8 JSON metadata blob
    meta       bytes     JSON object (sorted keys)
    count      u32       number of arrays
    per array:
      name_len u16, name (UTF-8)
      dtype    u8        1 = float32, 2 = float64, 3 = int64
      ndim     u8, dims u32 * ndim
      values   little-endian, row-major
"""
from __future__ import annotations

import io
import json
import os
import struct

import numpy as np

MAGIC = b"FCMP"
VERSION = 1
_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2, np.dtype("<i8"): 3}
_DTYPES = {v: k for k, v in _CODES.items()}


class ContainerError(ValueError):
    pass


def dumps(arrays: dict[str, np.ndarray], meta: dict | None = None) -> bytes:
    buf = io.BytesIO()
    meta_bytes = json.dumps(meta or {}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.dtype.newbyteorder("<")
        if le not in _CODES:
            raise ContainerError(f"{name}: unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", _CODES[le], arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=le).tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container: needed {n} bytes at offset {pos}, {len(view) - pos} left")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise ContainerError("bad magic: not an FCMP container")
    version, meta_len = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ContainerError(f"unsupported FCMP version {version}")
    meta = json.loads(bytes(take(meta_len)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = bytes(take(name_len)).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise ContainerError(f"{name}: unknown dtype code {code} at offset {pos - 2}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dtype = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(bytes(take(n)), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last array")
    return arrays, meta


def save(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, meta))


def load(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
