"""Flat binary container for named float32 tensors.

Layout: magic "DATT", u32 version, u32 record count, then per record a
u32 name length, the UTF-8 name, u32 rank, u32 extents and the row-major
little-endian float32 payload. Integers are little-endian. The format is
shared by weight files, statistics files and raw dataset tensors.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"DATT"
VERSION = 1

_U32 = struct.Struct("<I")


class RecordFormatError(ValueError):
    """File is not a record container (bad magic or malformed structure)."""


class RecordVersionError(RecordFormatError):
    """Container version is not the one this code writes."""


class RecordTruncatedError(RecordFormatError):
    """File ends mid-record; the message names the tensor that was cut off."""


class RecordDimensionError(RecordFormatError):
    """A tensor's shape disagrees with what the caller expects."""


def write_records(path, records):
    """Write an ordered list of (name, float32 ndarray) pairs to ``path``."""
    names = set()
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(records))]
    for name, arr in records:
        if name in names:
            raise RecordFormatError(f"duplicate record name {name!r}")
        names.add(name)
        arr = np.asarray(arr, dtype="<f4", order="C")
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(arr.ndim))
        for extent in arr.shape:
            chunks.append(_U32.pack(extent))
        chunks.append(arr.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise RecordTruncatedError(f"file truncated while reading {what}")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return _U32.unpack(self.take(4, what))[0]


def read_records(path):
    """Read a record container back as an ordered {name: float32 ndarray} dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise RecordFormatError(f"bad magic in {path}: not a record container")
    version = r.u32("version")
    if version != VERSION:
        raise RecordVersionError(f"unsupported container version {version} (expected {VERSION})")
    count = r.u32("record count")
    out = {}
    for i in range(count):
        label = f"record {i}"
        name_len = r.u32(f"name length of {label}")
        name = r.take(name_len, f"name of {label}").decode("utf-8")
        rank = r.u32(f"rank of {name!r}")
        if rank > 4:
            raise RecordFormatError(f"record {name!r} has rank {rank}; this format stores rank ≤ 4")
        shape = tuple(r.u32(f"extent of {name!r}") for _ in range(rank))
        numel = 1
        for extent in shape:
            numel *= extent
        payload = r.take(4 * numel, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)
        if name in out:
            raise RecordFormatError(f"duplicate record name {name!r}")
        out[name] = np.ascontiguousarray(arr) if arr.ndim else arr
    if r.pos != len(blob):
        raise RecordFormatError(f"{len(blob) - r.pos} trailing bytes after last record")
    return out


def expect_shape(records, name, shape):
    """Fetch ``name`` from a record dict, insisting on an exact shape."""
    if name not in records:
        raise RecordDimensionError(f"missing record {name!r}")
    arr = records[name]
    if arr.shape != tuple(shape):
        raise RecordDimensionError(f"record {name!r} has shape {arr.shape}, expected {tuple(shape)}")
    return arr
