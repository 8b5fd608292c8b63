"""Named-array checkpoint files.

Layout (all integers little-endian)::

    b"DPOS" | version u32 | record*
    record := name_len u32 | name utf-8 | dtype u8 | rank u32 | dims u64[rank] | raw values

Records run to end of file.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"DPOS"
VERSION = 1

DTYPE_TAGS = {
    np.dtype("<f4"): 0,
    np.dtype("<f8"): 1,
    np.dtype("<i8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i4"): 4,
}
TAG_DTYPES = {v: k for k, v in DTYPE_TAGS.items()}


def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if dt not in DTYPE_TAGS:
            raise TypeError(f"unsupported dtype {arr.dtype} for {name}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", DTYPE_TAGS[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return b"".join(parts)


def decode_arrays(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 8:
        raise FormatError("truncated header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    pos, out = 8, {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            if len(name.encode("utf-8")) != nlen:
                raise FormatError(f"truncated record name at byte {pos}")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            if tag not in TAG_DTYPES:
                raise FormatError(f"unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(buf):
                raise FormatError(
                    f"record {name!r} needs {nbytes} bytes at offset {pos}, file has {len(buf) - pos}")
            out[name] = np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize,
                                      offset=pos).reshape(dims).copy()
            pos += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated checkpoint at byte {pos}: {exc}") from None
    return out


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Atomic write: a crash never leaves a half-written checkpoint behind."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_arrays(arrays))
    os.replace(tmp, path)


def load_arrays(path) -> dict[str, np.ndarray]:
    return decode_arrays(Path(path).read_bytes())


def pack_json(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def unpack_json(arr: np.ndarray):
    return json.loads(arr.tobytes().decode("utf-8"))
