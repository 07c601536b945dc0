"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"AMD1" | u32 version | u32 d_h, n_layers, n_heads, d_k, d_v, d_ff
    | f64 clip | u32 feature flags | u32 tensor count
    | per tensor: u32 path length, UTF-8 path, u32 rank, u32 dims..., f32 data (row-major)
    | u64 checksum (BLAKE2b, 8-byte digest, of every preceding byte)
"""

import hashlib
import struct
from pathlib import Path

import numpy as np

from .params import Architecture, ModelParams

MAGIC = b"AMD1"
VERSION = 1
# bit 0: demand fed as d_i / D; bit 1: remaining load fed as D_t / D
FEATURE_FLAGS = 0b11


class CheckpointError(ValueError):
    pass


def _checksum(data):
    return struct.unpack("<Q", hashlib.blake2b(data, digest_size=8).digest())[0]


def dumps(params):
    arch = params.arch
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    out += struct.pack(
        "<6I", arch.d_h, arch.n_layers, arch.n_heads, arch.d_k, arch.d_v, arch.d_ff
    )
    out += struct.pack("<dII", arch.clip, FEATURE_FLAGS, len(params.tensors))
    for path, arr in params.items():
        name = path.encode("utf-8")
        out += struct.pack("<I", len(name)) + name
        out += struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    out += struct.pack("<Q", _checksum(bytes(out)))
    return bytes(out)


def loads(data):
    if len(data) < 8 + 8 or data[:4] != MAGIC:
        raise CheckpointError("not an AMD1 checkpoint")
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    if _checksum(body) != stored:
        raise CheckpointError("checksum mismatch")
    pos = 4

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, body, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    d_h, n_layers, n_heads, d_k, d_v, d_ff = take("<6I")
    clip, flags, count = take("<dII")
    if flags != FEATURE_FLAGS:
        raise CheckpointError(f"unsupported feature conventions {flags:#x}")
    arch = Architecture(d_h, n_layers, n_heads, clip)
    if (arch.d_k, arch.d_v, arch.d_ff) != (d_k, d_v, d_ff):
        raise CheckpointError("inconsistent head dimensions in header")
    tensors = {}
    for _ in range(count):
        (plen,) = take("<I")
        path = body[pos : pos + plen].decode("utf-8")
        pos += plen
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        tensors[path] = arr.astype(np.float64)
    if pos != len(body):
        raise CheckpointError("trailing bytes after tensor records")
    try:
        return ModelParams(arch, tensors)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None


def save(path, params):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(dumps(params))


def load(path, expect=None):
    """Load a checkpoint; ``expect`` (an :class:`Architecture`) guards against mismatches."""
    params = loads(Path(path).read_bytes())
    if expect is not None and params.arch != expect:
        raise CheckpointError(f"checkpoint architecture {params.arch} != requested {expect}")
    return params
