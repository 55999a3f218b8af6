"""Flat binary container for named arrays.

Layout (little-endian)::

    b"TCRA"  u16 version  u32 count
    count x { u16 name_len, name (utf-8), u8 dtype code, u8 ndim,
              ndim x u64 dims, payload }
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"TCRA"
VERSION = 1
_CODES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_BY_KIND = {"f": 0, "i": 1, "u": 2, "b": 2}


def _code_for(arr: np.ndarray) -> int:
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return 2
    if arr.dtype.kind not in _BY_KIND:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    return _BY_KIND[arr.dtype.kind] if arr.dtype.kind != "u" else 1


def write_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, value in arrays.items():
        arr = np.asarray(value)
        code = _code_for(arr)
        arr = np.ascontiguousarray(arr, dtype=_CODES[code])
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack(f"<BB{arr.ndim}Q", code, arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_arrays(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an array container (bad magic at byte offset 0)")
    version, count = struct.unpack_from("<HI", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    pos = 10
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            dtype = _CODES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(raw):
                raise ValueError(f"{path}: truncated payload for {name!r} at byte offset {pos}")
            out[name] = np.frombuffer(raw, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
            pos += nbytes
    except struct.error as exc:
        raise ValueError(f"{path}: truncated container at byte offset {pos}") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: {len(raw) - pos} trailing bytes at byte offset {pos}")
    return out
