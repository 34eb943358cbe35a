"""DWF1 binary tensor container.

Layout (little-endian)::

    b"DWF1" | dtype:u8 | ndim:u8 | dims: ndim x u64 | row-major payload

dtype codes: 0 float32, 1 uint8, 2 float64 (checkpoints only).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .tensor import Tensor

MAGIC = b"DWF1"

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}
_CODE_OF = {("f", 4): 0, ("u", 1): 1, ("f", 8): 2}


class TensorFileError(ValueError):
    pass


class BadMagicError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class TrailingBytesError(TensorFileError):
    pass


class UnknownDtypeError(TensorFileError):
    pass


class DtypeMismatchError(TensorFileError):
    pass


class NdimMismatchError(TensorFileError):
    pass


def encode(arr, dtype=None) -> bytes:
    """Serialize an array-like (or Tensor) to DWF1 bytes.

    Floating data is stored as float32 unless ``dtype`` says otherwise;
    integer data as uint8.
    """
    if isinstance(arr, Tensor):
        arr = arr.data
    arr = np.asarray(arr)
    if dtype is None:
        dtype = "u1" if arr.dtype.kind in "uib" else "<f4"
    dtype = np.dtype(dtype)
    key = (dtype.kind, dtype.itemsize)
    if key not in _CODE_OF:
        raise UnknownDtypeError(f"unsupported dtype {dtype}")
    dtype = DTYPE_CODES[_CODE_OF[key]]
    if dtype.kind == "f":
        if not np.all(np.isfinite(arr)):
            raise ValueError("refusing to write non-finite values")
    else:
        if arr.size and (arr.min() < 0 or arr.max() > 255):
            raise ValueError("uint8 payload out of range [0, 255]")
    if arr.ndim > 255:
        raise ValueError(f"too many dimensions: {arr.ndim}")
    header = MAGIC + struct.pack("<BB", _CODE_OF[key], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dtype).tobytes()


def decode(buf: bytes, dtype=None, ndim: int | None = None) -> np.ndarray:
    if len(buf) < 6:
        raise TruncatedPayloadError(f"header needs 6 bytes, got {len(buf)}")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    code, nd = struct.unpack_from("<BB", buf, 4)
    if code not in DTYPE_CODES:
        raise UnknownDtypeError(f"unknown dtype code {code}")
    stored = DTYPE_CODES[code]
    if dtype is not None and np.dtype(dtype) != stored:
        raise DtypeMismatchError(f"file holds {stored}, expected {np.dtype(dtype)}")
    if ndim is not None and nd != ndim:
        raise NdimMismatchError(f"file holds {nd} dims, expected {ndim}")
    off = 6 + 8 * nd
    if len(buf) < off:
        raise TruncatedPayloadError(f"header declares {nd} dims but file ends at byte {len(buf)}")
    dims = struct.unpack_from(f"<{nd}Q", buf, 6)
    count = int(np.prod(dims, dtype=np.int64)) if nd else 1
    need = off + count * stored.itemsize
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload needs {need - off} bytes, found {len(buf) - off}")
    if len(buf) > need:
        raise TrailingBytesError(f"{len(buf) - need} unexpected bytes after payload")
    return np.frombuffer(buf, dtype=stored, count=count, offset=off).reshape(dims).copy()


def write_tensor_file(path, t, dtype=None) -> None:
    data = encode(t, dtype)
    os.makedirs(os.path.dirname(os.fspath(path)) or ".", exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def read_tensor_file(path, dtype=None, ndim: int | None = None) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), dtype=dtype, ndim=ndim)


def read_header(path) -> tuple[np.dtype, tuple[int, ...]]:
    with open(path, "rb") as fh:
        head = fh.read(6)
        if len(head) < 6:
            raise TruncatedPayloadError("file shorter than header")
        if head[:4] != MAGIC:
            raise BadMagicError(f"bad magic {head[:4]!r}")
        code, nd = struct.unpack_from("<BB", head, 4)
        if code not in DTYPE_CODES:
            raise UnknownDtypeError(f"unknown dtype code {code}")
        dims = fh.read(8 * nd)
        if len(dims) < 8 * nd:
            raise TruncatedPayloadError("dims truncated")
    return DTYPE_CODES[code], struct.unpack(f"<{nd}Q", dims)
