"""ISCK1 checkpoint files.

Layout (little-endian)::

    b"ISCK1" | u32 count | count x record
    record  = u32 name_len | utf-8 name | u32 rank | u32[rank] extents | f32[prod(extents)]
"""
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"ISCK1"


def encode_checkpoint(arrays):
    """Serialize ``{name: array}`` (sorted by name) to bytes."""
    parts = [MAGIC, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf):
    buf = memoryview(bytes(buf))
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated checkpoint while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC), "magic")) != MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    (count,) = struct.unpack("<I", take(4, "count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        start = pos
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("parameter name is not valid UTF-8", start) from None
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        start = pos
        values = np.frombuffer(take(4 * n, f"payload of {name!r}"), dtype="<f4").reshape(dims)
        if not np.isfinite(values).all():
            raise FormatError(f"non-finite value in {name!r}", start)
        if name in arrays:
            raise FormatError(f"duplicate parameter {name!r}", start)
        arrays[name] = values.astype(np.float32)
    if pos != len(buf):
        raise FormatError("trailing bytes after last record", pos)
    return arrays


def save_checkpoint(path, arrays):
    """Write ``arrays`` (a dict or a :class:`ParamSet`) to ``path``."""
    if hasattr(arrays, "snapshot"):
        arrays = arrays.snapshot()
    with open(path, "wb") as fh:
        fh.write(encode_checkpoint(arrays))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
