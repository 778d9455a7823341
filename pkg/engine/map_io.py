"""
FVTM token-map files.

Layout: magic ``FVTM``, then h, w, d as little-endian uint32, then h*w*d
little-endian float32 values in row-major token order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from config import MapFormatError
from engine.numkern import TokenMap

MAGIC = b"FVTM"
_DIM = struct.Struct("<I")
HEADER_SIZE = len(MAGIC) + 3 * _DIM.size


def encode_map(x: TokenMap) -> bytes:
    header = MAGIC + struct.pack("<3I", x.h, x.w, x.d)
    return header + x.data.astype("<f4", copy=False).tobytes(order="C")


def decode_map(data: bytes) -> TokenMap:
    """
    Parse FVTM bytes.

    Raises:
        MapFormatError: With the byte offset of the first bad or missing field
    """
    if data[: len(MAGIC)] != MAGIC:
        raise MapFormatError("bad magic, expected FVTM", offset=0, component="FVTM")
    dims: list[int] = []
    for i, name in enumerate(("h", "w", "d")):
        offset = len(MAGIC) + i * _DIM.size
        if len(data) < offset + _DIM.size:
            raise MapFormatError(f"truncated header, missing {name}", offset=offset, component="FVTM")
        (value,) = _DIM.unpack_from(data, offset)
        if value == 0:
            raise MapFormatError(f"{name} must be >= 1", offset=offset, component="FVTM")
        dims.append(value)
    h, w, d = dims
    expected = HEADER_SIZE + 4 * h * w * d
    if len(data) < expected:
        raise MapFormatError(
            f"truncated payload, expected {expected} bytes, got {len(data)}",
            offset=len(data),
            component="FVTM",
        )
    if len(data) > expected:
        raise MapFormatError(
            f"trailing bytes after payload ({len(data) - expected})", offset=expected, component="FVTM"
        )
    values = np.frombuffer(data, dtype="<f4", count=h * w * d, offset=HEADER_SIZE)
    try:
        return TokenMap(values.astype(np.float32).reshape(h, w, d))
    except ValueError as exc:
        raise MapFormatError(str(exc), offset=HEADER_SIZE, component="FVTM") from exc


def write_map(x: TokenMap, path: str | Path) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(encode_map(x))
    return out


def read_map(path: str | Path) -> TokenMap:
    return decode_map(Path(path).read_bytes())
