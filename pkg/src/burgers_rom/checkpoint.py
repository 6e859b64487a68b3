"""Flat binary parameter checkpoints.

Layout: magic ``RFW1``, then for each named parameter in order: name length
(u32 LE), UTF-8 name, rank (u32), extents (u32 each), payload (f64 LE,
row-major). Round trips are bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"RFW1"


def write_params(params: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC]
    for name, arr in params.items():
        arr = np.require(np.asarray(arr, dtype="<f8"), requirements="C")
        name_b = name.encode("utf-8")
        out.append(struct.pack("<I", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def read_params(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError(f"bad checkpoint magic {blob[:4]!r}, expected {MAGIC!r}")
    pos = 4
    params: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError("truncated checkpoint payload")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    while pos < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = take(8 * count)
        params[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).copy()
    return params


def save_params(path, params: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(write_params(params))


def load_params(path) -> dict[str, np.ndarray]:
    return read_params(Path(path).read_bytes())
