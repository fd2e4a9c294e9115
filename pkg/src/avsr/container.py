"""Checksummed binary container for named tensors.

Layout (little-endian): magic "AVTC", u32 version, u32 entry count, then per
entry: u16 name length + UTF-8 name, u8 dtype code, u8 ndim, u64 dims,
u64 payload byte length, u32 CRC32 of the payload, payload (row-major).
Entries are written sorted by name so files are byte-deterministic.
"""

from __future__ import annotations

import os
import struct
import tempfile
import zlib
from typing import Dict

import numpy as np

from .errors import DataError

MAGIC = b"AVTC"
VERSION = 1

_DTYPE_CODES = {0: np.dtype("u1"), 1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODE_FOR_KIND = {"u1": 0, "f4": 1, "f8": 2}


def _dtype_code(arr: np.ndarray) -> int:
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _CODE_FOR_KIND:
        raise DataError(f"unsupported tensor dtype {arr.dtype} (use u8/f32/f64)")
    return _CODE_FOR_KIND[key]


def pack_container(tensors: Dict[str, np.ndarray]) -> bytes:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        if arr.ndim == 0:
            arr = arr.reshape(1)
        code = _dtype_code(arr)
        payload = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        name_bytes = name.encode("utf-8")
        blob += struct.pack("<H", len(name_bytes)) + name_bytes
        blob += struct.pack("<BB", code, arr.ndim)
        blob += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        blob += struct.pack("<QI", len(payload), zlib.crc32(payload) & 0xFFFFFFFF)
        blob += payload
    return bytes(blob)


def write_container(path: str, tensors: Dict[str, np.ndarray]) -> None:
    """Atomic write (temp file + rename)."""
    blob = pack_container(tensors)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated container")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_container(path: str) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return unpack_container(f.read(), path)


def unpack_container(data: bytes, path: str = "<bytes>") -> Dict[str, np.ndarray]:
    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise DataError(f"{path}: not a tensor container (bad magic)")
    version, count = reader.unpack("<II")
    if version != VERSION:
        raise DataError(f"{path}: unsupported container version {version}")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8")
        code, ndim = reader.unpack("<BB")
        if code not in _DTYPE_CODES:
            raise DataError(f"{path}: unknown dtype code {code}")
        shape = reader.unpack(f"<{ndim}Q") if ndim else ()
        if any(dim <= 0 for dim in shape):
            raise DataError(f"{path}: non-positive dimension in {name}")
        payload_len, crc = reader.unpack("<QI")
        payload = reader.take(payload_len)
        if (zlib.crc32(payload) & 0xFFFFFFFF) != crc:
            raise DataError(f"{path}: checksum mismatch for entry {name!r}")
        arr = np.frombuffer(payload, dtype=_DTYPE_CODES[code]).reshape(shape)
        out[name] = arr.copy()
    return out
