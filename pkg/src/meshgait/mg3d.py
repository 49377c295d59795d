"""Reader/writer for the ``.mg3d`` dense tensor sidecar format.

Layout (all little-endian)::

    b"MG3D" | u32 rank | rank x u32 dims | float32 payload (row-major)
"""

from __future__ import annotations

import os
import struct

import numpy as np

from meshgait.errors import FormatError

MAGIC = b"MG3D"


def encode(array: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(array, dtype="<f4")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: bad magic, not an mg3d file")
    (rank,) = struct.unpack_from("<I", buf, 4)
    head = 8 + 4 * rank
    if len(buf) < head:
        raise FormatError(f"{source}: truncated header (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    expected = int(np.prod(dims, dtype=np.int64)) * 4
    if len(buf) - head != expected:
        raise FormatError(
            f"{source}: payload is {len(buf) - head} bytes, header dims {tuple(dims)} need {expected}"
        )
    return np.frombuffer(buf, dtype="<f4", offset=head).reshape(dims).astype(np.float32)


def write(path: str | os.PathLike, array: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def read(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode(fh.read(), source=str(path))
