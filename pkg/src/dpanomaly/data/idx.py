"""IDX container IO (the big-endian layout used by the MNIST distribution files)."""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

_DTYPES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_CODES = {np.dtype(v).newbyteorder("=") if v.itemsize > 1 else v: k for k, v in _DTYPES.items()}


class IdxFormatError(ValueError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (byte offset {offset})")
        self.offset = offset


def _open(path, mode):
    path = Path(path)
    if path.suffix != ".gz":
        return open(path, mode)
    # mtime=0 keeps written archives byte-reproducible
    return gzip.GzipFile(path, mode, mtime=0)


def parse_idx(data: bytes, expect_magic: int | None = None) -> np.ndarray:
    if len(data) < 4:
        raise IdxFormatError("truncated header", len(data))
    zero, code, ndim = struct.unpack_from(">HBB", data, 0)
    magic = (code << 8) | ndim
    if zero != 0 or code not in _DTYPES or (expect_magic is not None and magic != expect_magic):
        want = f" expected 0x{expect_magic:08x}" if expect_magic is not None else ""
        raise IdxFormatError(f"bad magic 0x{struct.unpack_from('>I', data, 0)[0]:08x}{want}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxFormatError("truncated dimension table", len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    dtype = _DTYPES[code]
    need = header + int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(data) < need:
        raise IdxFormatError(f"truncated payload: need {need} bytes, have {len(data)}", len(data))
    if len(data) > need:
        raise IdxFormatError(f"{len(data) - need} unexpected trailing bytes", need)
    arr = np.frombuffer(data, dtype=dtype, offset=header, count=int(np.prod(dims, dtype=np.int64)))
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    with _open(path, "rb") as fh:
        return parse_idx(fh.read(), expect_magic)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=") if arr.dtype.itemsize > 1 else arr.dtype
    if key not in _CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX type code")
    code = _CODES[key]
    header = struct.pack(">HBB", 0, code, arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def write_idx(arr: np.ndarray, path) -> None:
    with _open(path, "wb") as fh:
        fh.write(encode_idx(arr))
