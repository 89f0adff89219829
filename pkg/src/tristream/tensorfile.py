"""Binary tensor files.

Layout: magic ``T3SR``, u8 version (1), u8 rank, rank x u32 little-endian
extents, then the float32 little-endian row-major payload.
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"T3SR"
VERSION = 1


class TensorFileError(ValueError):
    pass


def dumps(array) -> bytes:
    arr = np.array(array, dtype="<f4", order="C")
    if arr.ndim > 255:
        raise TensorFileError("rank above 255 is not representable")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < 6 or buf[:4] != MAGIC:
        raise TensorFileError("bad magic, not a T3SR tensor file")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != VERSION:
        raise TensorFileError(f"unsupported tensor file version {version}")
    off = 6 + 4 * rank
    if len(buf) < off:
        raise TensorFileError("truncated header")
    shape = struct.unpack_from(f"<{rank}I", buf, 6)
    count = int(np.prod(shape, dtype=np.int64))
    if len(buf) - off != 4 * count:
        raise TensorFileError(f"payload holds {len(buf) - off} bytes, expected {4 * count} for shape {shape}")
    return np.frombuffer(buf, dtype="<f4", offset=off).reshape(shape).astype(np.float32)


def save(path, array) -> None:
    Path(path).write_bytes(dumps(array))


def load(path) -> np.ndarray:
    return loads(Path(path).read_bytes())
