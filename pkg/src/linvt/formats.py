"""LVT1 token-stream files.

Layout: ``b"LVT1"``, then four little-endian u32 (T, N, C, dtype code), then
``T*N*C`` row-major values in (t, p, c) order. Dtype code 1 is float32, 2 is
float64. Trailing bytes are rejected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import CorruptFileError
from .model import atomic_write

MAGIC = b"LVT1"
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_HEADER = struct.Struct("<4I")


def encode_stream(tokens: np.ndarray, dtype_code: int = 2) -> bytes:
    tokens = np.asarray(tokens)
    if tokens.ndim != 3:
        raise ValueError(f"expected a [T, N, C] array, got shape {tokens.shape}")
    if dtype_code not in DTYPES:
        raise ValueError(f"unknown dtype code {dtype_code}")
    payload = np.ascontiguousarray(tokens, dtype=DTYPES[dtype_code]).tobytes()
    return MAGIC + _HEADER.pack(*tokens.shape, dtype_code) + payload


def decode_stream(buf: bytes) -> tuple[np.ndarray, int]:
    """Returns the ``[T, N, C]`` array (in the file's dtype) and the dtype code."""
    if len(buf) < 4 + _HEADER.size or buf[:4] != MAGIC:
        raise CorruptFileError("not an LVT1 stream (bad magic or short header)")
    t, n, c, code = _HEADER.unpack_from(buf, 4)
    if code not in DTYPES:
        raise CorruptFileError(f"unknown dtype code {code}")
    if min(t, n, c) < 1:
        raise CorruptFileError(f"non-positive extents T={t} N={n} C={c}")
    dtype = DTYPES[code]
    need = t * n * c * dtype.itemsize
    have = len(buf) - 4 - _HEADER.size
    if have != need:
        kind = "trailing bytes" if have > need else "truncated payload"
        raise CorruptFileError(f"{kind}: payload is {have} bytes, header implies {need}")
    arr = np.frombuffer(buf, dtype=dtype, offset=4 + _HEADER.size).reshape(t, n, c)
    return arr, code


def read_stream(path) -> tuple[np.ndarray, int]:
    return decode_stream(Path(path).read_bytes())


def write_stream(path, tokens: np.ndarray, dtype_code: int = 2) -> None:
    atomic_write(path, encode_stream(tokens, dtype_code))
