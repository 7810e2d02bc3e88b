"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"DPAMCKPT"  magic
    u32          format version
    u32 + bytes  architecture descriptor as UTF-8 JSON
    u32          number of tensors
    per tensor:  u16 name length, name, u8 ndim, ndim x u32 dims, float64 payload
    32 bytes     SHA-256 of everything above
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from dpanomaly.nn.model import Model, ModelArch

MAGIC = b"DPAMCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(model: Model) -> bytes:
    arch = json.dumps(model.arch.to_dict(), sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(arch)), arch, struct.pack("<I", len(model.params))]
    for name, v in model.params.items():
        nb = name.encode()
        out.append(struct.pack("<HB", len(nb), v.ndim) + nb)
        out.append(struct.pack(f"<{v.ndim}I", *v.shape))
        out.append(np.ascontiguousarray(v, dtype="<f8").tobytes())
    body = b"".join(out)
    return body + hashlib.sha256(body).digest()


def loads(data: bytes) -> Model:
    if len(data) < len(MAGIC) + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint content hash mismatch")
    pos = len(MAGIC)
    version, alen = struct.unpack_from("<II", body, pos)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 8
    arch = ModelArch.from_dict(json.loads(body[pos : pos + alen]))
    pos += alen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos : pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        n = int(np.prod(shape, dtype=np.int64))
        params[name] = np.frombuffer(body, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
    if pos != len(body):
        raise CheckpointError("trailing bytes in checkpoint")
    return Model(arch, params)


def save(model: Model, path) -> str:
    """Write the checkpoint and return its SHA-256 hex digest."""
    data = dumps(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load(path) -> Model:
    return loads(Path(path).read_bytes())
