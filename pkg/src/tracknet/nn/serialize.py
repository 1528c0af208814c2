"""``.tbnt`` parameter files.

Layout (little-endian): magic ``b"TBNT"``, ``u16`` version, then one record
per array until end of file: ``u16`` name length, UTF-8 name, ``u8`` rank,
``u32`` per dimension, float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"TBNT"
VERSION = 1


class ModelFormatError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> "OrderedDict[str, np.ndarray]":
    if buf[:4] != MAGIC:
        raise ModelFormatError("not a TBNT model file (bad magic)")
    if len(buf) < 6:
        raise ModelFormatError("truncated header")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise ModelFormatError(f"unsupported model file version {version}")
    pos = 6
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(buf):
                raise ModelFormatError(f"truncated payload for {name!r}")
            out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise ModelFormatError("truncated record header") from exc
    return out


def save(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: str | Path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
