"""Versioned binary container of named tensors.

Layout (little-endian)::

    magic       4 bytes   b"BNNF" (checkpoint) or b"BNNP" (packed export)
    version     u32
    count       u32
    count x record:
        name_len  u16, name utf-8
        dtype     u8  (see DTYPE_TAGS)
        rank      u8
        dims      rank x u32
        payload   raw little-endian elements
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .errors import FormatError

CHECKPOINT_MAGIC = b"BNNF"
PACKED_MAGIC = b"BNNP"
FORMAT_VERSION = 1

DTYPE_TAGS = {
    0: np.dtype("<f4"),
    1: np.dtype("<f8"),
    2: np.dtype("<i4"),
    3: np.dtype("<i8"),
    4: np.dtype("<u8"),
    5: np.dtype("u1"),
}
_TAG_OF = {dt: tag for tag, dt in DTYPE_TAGS.items()}


def _tag(arr):
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt == np.bool_:
        return 5
    for tag, known in DTYPE_TAGS.items():
        if known == dt:
            return tag
    raise FormatError(f"unsupported dtype {arr.dtype} in container")


def encode(records, magic=CHECKPOINT_MAGIC, version=FORMAT_VERSION):
    """Serialize an ordered mapping of name -> array to bytes."""
    out = [magic, struct.pack("<II", version, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr)
        tag = _tag(arr)
        name_b = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_b)))
        out.append(name_b)
        out.append(struct.pack("<BB", tag, arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    return b"".join(out)


def decode(raw, magic=CHECKPOINT_MAGIC, version=FORMAT_VERSION):
    if raw[:4] != magic:
        raise FormatError(f"bad container magic {raw[:4]!r}, expected {magic!r}")
    if len(raw) < 12:
        raise FormatError("truncated container header")
    ver, count = struct.unpack_from("<II", raw, 4)
    if ver != version:
        raise FormatError(f"container version {ver} is not supported (expected {version})")
    pos = 12
    records = OrderedDict()
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos : pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BB", raw, pos)
            pos += 2
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            dt = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if pos + nbytes > len(raw):
                raise FormatError(f"record {name!r} runs past the end of the container")
            records[name] = np.frombuffer(raw, dtype=dt, count=int(np.prod(dims, dtype=np.int64)), offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt container: {exc}") from exc
    if pos != len(raw):
        raise FormatError(f"{len(raw) - pos} trailing bytes after the last record")
    return records


def save(path, records, magic=CHECKPOINT_MAGIC):
    with open(path, "wb") as f:
        f.write(encode(records, magic))


def load(path, magic=CHECKPOINT_MAGIC):
    with open(path, "rb") as f:
        return decode(f.read(), magic)
