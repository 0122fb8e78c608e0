"""Bit-exact binary store for named float32 arrays.

Layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"CAET"
    4       4     format version (u32, currently 1)
    8       4     entry count (u32)
    12      4     metadata length M (u32)
    16      M     metadata, UTF-8 JSON object
    ...           entry table, sorted by name; per entry:
                    u16 name length L, L bytes UTF-8 name,
                    u8 dtype tag (1 = float32), u8 ndim,
                    ndim x u32 extents,
                    u64 payload offset (from file start, multiple of 64),
                    u64 payload length in bytes
    ...           zero padding, then payloads, each starting on a 64-byte boundary
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CAET"
VERSION = 1
ALIGN = 64
DTYPE_TAGS = {1: np.dtype("<f4")}
_TAG_OF = {np.dtype("<f4"): 1}


class ArchiveFormatError(ValueError):
    pass


@dataclass
class Archive:
    tensors: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    version: int = VERSION


def _align(n: int) -> int:
    return (n + ALIGN - 1) // ALIGN * ALIGN


def encode_archive(tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> bytes:
    names = sorted(tensors)
    arrays = []
    for name in names:
        arr = np.asarray(tensors[name])
        if arr.dtype != np.float32:
            raise TypeError(f"{name}: only float32 entries are supported, got {arr.dtype}")
        arrays.append(np.asarray(arr, dtype="<f4", order="C"))  # ascontiguousarray would promote 0-d to 1-d
    meta = json.dumps(dict(metadata or {}), sort_keys=True).encode("utf-8")

    table_size = 0
    for name, arr in zip(names, arrays):
        table_size += 2 + len(name.encode("utf-8")) + 2 + 4 * arr.ndim + 16
    offset = _align(16 + len(meta) + table_size)

    table = bytearray()
    offsets = []
    for name, arr in zip(names, arrays):
        raw = name.encode("utf-8")
        table += struct.pack("<H", len(raw)) + raw
        table += struct.pack("<BB", 1, arr.ndim)
        table += struct.pack(f"<{arr.ndim}I", *arr.shape)
        table += struct.pack("<QQ", offset, arr.nbytes)
        offsets.append(offset)
        offset = _align(offset + arr.nbytes)

    out = bytearray(struct.pack("<4sIII", MAGIC, VERSION, len(names), len(meta)))
    out += meta
    out += table
    for start, arr in zip(offsets, arrays):
        out += b"\0" * (start - len(out))
        out += arr.tobytes()
    return bytes(out)


def decode_archive(buf: bytes) -> Archive:
    try:
        return _decode(memoryview(buf))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ArchiveFormatError(f"corrupt archive: {exc}") from None


def _decode(buf: memoryview) -> Archive:
    if len(buf) < 16 or bytes(buf[:4]) != MAGIC:
        raise ArchiveFormatError("bad magic")
    _, version, count, meta_len = struct.unpack_from("<4sIII", buf, 0)
    if version != VERSION:
        raise ArchiveFormatError(f"unsupported format version {version}")
    pos = 16
    meta = json.loads(bytes(buf[pos : pos + meta_len]).decode("utf-8")) if meta_len else {}
    pos += meta_len
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = bytes(buf[pos : pos + name_len]).decode("utf-8")
        pos += name_len
        tag, ndim = struct.unpack_from("<BB", buf, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        start, nbytes = struct.unpack_from("<QQ", buf, pos)
        pos += 16
        if tag not in DTYPE_TAGS:
            raise ArchiveFormatError(f"{name}: unknown dtype tag {tag}")
        dtype = DTYPE_TAGS[tag]
        if start % ALIGN or start + nbytes > len(buf) or nbytes != dtype.itemsize * int(np.prod(shape)):
            raise ArchiveFormatError(f"{name}: bad payload extent")
        entries.append((name, dtype, shape, start, nbytes))
    names = [e[0] for e in entries]
    if names != sorted(names) or len(set(names)) != len(names):
        raise ArchiveFormatError("entry table is not sorted by unique name")
    tensors = {}
    for name, dtype, shape, start, nbytes in entries:
        arr = np.frombuffer(buf[start : start + nbytes], dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(np.float32)
    return Archive(tensors, meta, version)


def write_archive(path: str | os.PathLike, tensors: Mapping[str, np.ndarray], metadata: Mapping | None = None) -> Path:
    """Write atomically: readers never observe a partially written file."""
    path = Path(path)
    payload = encode_archive(tensors, metadata)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def read_archive(path: str | os.PathLike) -> Archive:
    return decode_archive(Path(path).read_bytes())
