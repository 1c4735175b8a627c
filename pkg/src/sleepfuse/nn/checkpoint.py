"""Binary checkpoint codec for named parameters.

Layout, all little-endian:

    magic "SFCK" | u32 version | u64 param count
    per parameter:
        u16 name length | name bytes (utf-8) | u32 rank | u32 * rank extents
        | f64 * prod(extents) values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from sleepfuse.errors import FormatError

MAGIC = b"SFCK"
VERSION = 1
_HEAD = struct.Struct("<4sIQ")
_NAME_LEN = struct.Struct("<H")
_RANK = struct.Struct("<I")


def save_checkpoint(path, params: list) -> None:
    """Write parameters (objects with .name/.data) in the given order."""
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise FormatError("duplicate parameter names in checkpoint")
    chunks = [_HEAD.pack(MAGIC, VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        values = np.ascontiguousarray(p.data, dtype="<f8")
        chunks.append(_NAME_LEN.pack(len(name)))
        chunks.append(name)
        chunks.append(_RANK.pack(values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict:
    """Read a checkpoint into an insertion-ordered {name: array} dict."""
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise FormatError(f"checkpoint not found: {path}") from None
    if len(blob) < _HEAD.size:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, count = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset = _HEAD.size
    out: dict = {}
    for _ in range(count):
        try:
            (name_len,) = _NAME_LEN.unpack_from(blob, offset)
            offset += _NAME_LEN.size
            if len(blob) < offset + name_len:
                raise FormatError(f"{path}: truncated parameter name")
            name = blob[offset : offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = _RANK.unpack_from(blob, offset)
            offset += _RANK.size
            shape = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            n_values = int(np.prod(shape, dtype=np.int64)) if rank else 1
            end = offset + 8 * n_values
            if end > len(blob):
                raise FormatError(f"{path}: truncated values for parameter {name!r}")
            values = np.frombuffer(blob, dtype="<f8", count=n_values, offset=offset)
            offset = end
        except struct.error as exc:
            raise FormatError(f"{path}: truncated checkpoint ({exc})") from exc
        if name in out:
            raise FormatError(f"{path}: duplicate parameter {name!r}")
        out[name] = values.reshape(shape).astype(np.float64)
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return out
