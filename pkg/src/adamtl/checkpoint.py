"""Checkpoint files.

Layout: the 7 magic bytes ``ADAMTL1``, then one record per tensor in sorted
name order::

    uint32 name_length | name bytes (utf-8) | uint32 rank | uint32 dims[rank] | float32 payload

All integers and floats are little-endian.
"""
from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"ADAMTL1"


def encode(state: dict) -> bytes:
    parts = [MAGIC]
    for name in sorted(state):
        arr = np.ascontiguousarray(np.asarray(state[name], dtype="<f4"))
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict:
    if not blob.startswith(MAGIC):
        raise ValueError("not an ADAMTL1 checkpoint")
    pos = len(MAGIC)
    state = {}
    while pos < len(blob):
        (n,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        name = blob[pos:pos + n].decode()
        pos += n
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * count
    return state


def save(path: str, state: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(state))


def load(path: str) -> dict:
    with open(path, "rb") as fh:
        return decode(fh.read())


def digest(state: dict) -> str:
    return hashlib.sha256(encode(state)).hexdigest()
