"""NDT1 tensor container: little-endian header + raw row-major payload.

Layout: ``b"NDT1"``, dtype code (u8), rank (u8), rank × extent (u64), payload.
"""
import struct

import numpy as np

from vlae_lab.domain.errors import DataFormatError

MAGIC = b"NDT1"

_DTYPE_CODES: dict[int, np.dtype] = {
    1: np.dtype("<f8"),
    2: np.dtype("<f4"),
    3: np.dtype("u1"),
    4: np.dtype("<i8"),
}
_CODE_OF = {dt.str.lstrip("<|"): code for code, dt in _DTYPE_CODES.items()}


def encode_tensor(array: np.ndarray) -> bytes:
    arr = np.asarray(array)
    key = arr.dtype.newbyteorder("<").str.lstrip("<|")
    code = _CODE_OF.get(key)
    if code is None:
        raise DataFormatError(f"unsupported dtype {arr.dtype}")
    payload = np.ascontiguousarray(arr, dtype=_DTYPE_CODES[code]).tobytes()
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + payload


def decode_tensor(blob: bytes) -> np.ndarray:
    if len(blob) < 6:
        raise DataFormatError("truncated header")
    if blob[:4] != MAGIC:
        raise DataFormatError("magic mismatch")
    code, rank = struct.unpack_from("<BB", blob, 4)
    if code not in _DTYPE_CODES:
        raise DataFormatError(f"unknown dtype code {code}")
    offset = 6 + 8 * rank
    if len(blob) < offset:
        raise DataFormatError("truncated header")
    shape = struct.unpack_from(f"<{rank}Q", blob, 6)
    dtype = _DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise DataFormatError(f"payload has {len(blob) - offset} bytes, expected {expected}")
    return np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape).copy()
