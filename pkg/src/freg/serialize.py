"""Chunked binary tensor container.

Layout (all integers little-endian u32, payloads little-endian float32):

    magic   4 bytes  "FREG"
    version u32      currently 1
    record* name_len u32, name utf-8, rank u32, dims u32 * rank, payload

Round-trips are bit-exact, including NaN payload bits.
"""

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"FREG"
VERSION = 1


class FormatError(ValueError):
    """Corrupt or foreign tensor container."""


def write_tensors(path, tensors: "OrderedDict[str, np.ndarray] | dict") -> None:
    """Write named float32 arrays in insertion order."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float32)
        enc = name.encode("utf-8")
        blob += struct.pack("<I", len(enc))
        blob += enc
        blob += struct.pack("<I", a.ndim)
        blob += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        blob += a.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    """Read a container written by ``write_tensors``."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    pos = 8
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    total = len(raw)
    while pos < total:
        try:
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos) if rank else ()
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            end = pos + 4 * count
            if end > total:
                raise FormatError(f"{path}: truncated payload for {name!r}")
            arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
            pos = end
        except struct.error as exc:
            raise FormatError(f"{path}: truncated record header") from exc
        out[name] = arr.reshape(dims).astype(np.float32)  # copy: writable, native order
    return out


def sha256_of_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()
