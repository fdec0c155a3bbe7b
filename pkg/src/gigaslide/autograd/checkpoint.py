"""Binary container for named arrays.

Layout (all integers little-endian)::

    magic      8 bytes   b"GIGACKPT"
    version    u16
    count      u32
    entries    count x { name_len u16, name utf-8, dtype u8, ndim u8,
                         shape ndim x u64, raw little-endian values }
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

MAGIC = b"GIGACKPT"
VERSION = 1

_DTYPES = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("u1"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("?"),
}
_CODES = {np.dtype(v).newbyteorder("<") if v.kind not in "ub" else v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def _code(dtype: np.dtype) -> int:
    dt = np.dtype(dtype)
    if dt.kind not in "ub":
        dt = dt.newbyteorder("<")
    try:
        return _CODES[dt]
    except KeyError:
        raise CheckpointError(f"unsupported dtype {dtype}") from None


def dumps(arrays: "dict[str, np.ndarray]") -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", VERSION, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _code(arr.dtype)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", code, raw.ndim))
        buf.write(struct.pack(f"<{raw.ndim}Q", *raw.shape))
        buf.write(raw.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(blob)
    if bytes(view[:8]) != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint container")
    version, count = struct.unpack_from("<HI", view, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported container version {version}")
    pos = 14
    out = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + nlen]).decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", view, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", view, pos)
        pos += 8 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"unknown dtype code {code} for {name!r}")
        n = int(np.prod(shape)) if ndim else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(view):
            raise CheckpointError(f"truncated data for {name!r}")
        arr = np.frombuffer(view[pos : pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
        out[name] = arr
    return out


def save(path, arrays: "dict[str, np.ndarray]") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(arrays))
    tmp.replace(path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    return loads(Path(path).read_bytes())
