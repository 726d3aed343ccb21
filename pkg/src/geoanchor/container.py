"""Named-tensor binary container shared by checkpoints and demonstration files.

Layout (all integers little-endian)::

    b"GAPC" | u32 version (=1) | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 ndim | u32 dims[ndim] | f64 data
    u32 JSON length | UTF-8 JSON blob
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GAPC"
VERSION = 1


class ContainerError(ValueError):
    pass


class TruncatedFileError(ContainerError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class ContainerShapeError(ContainerError):
    pass


def encode(tensors: dict[str, np.ndarray], blob: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    meta = json.dumps(blob, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(raw: bytes, validate=None) -> tuple[dict[str, np.ndarray], dict]:
    """Parse a container. Nothing is returned unless the whole file validates.

    ``validate(name, dims, seen)`` is called on every shape-table entry before
    that tensor's data is consumed; ``seen`` maps earlier names to their dims.
    It should raise :class:`ContainerShapeError` on an inconsistent entry.
    """
    r = _Reader(raw)
    if r.take(4, "magic") != MAGIC:
        raise BadMagicError("bad magic: not a GAPC container")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version} (expected {VERSION})")
    table = []
    seen: dict[str, tuple[int, ...]] = {}
    for i in range(count):
        (nlen,) = r.unpack("<H", f"tensor {i} name length")
        try:
            name = r.take(nlen, f"tensor {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"tensor {i} name is not UTF-8") from exc
        (ndim,) = r.unpack("<B", f"tensor {name!r} ndim")
        dims = tuple(r.unpack(f"<{ndim}I", f"tensor {name!r} dims"))
        if name in seen:
            raise ContainerError(f"duplicate tensor {name!r}")
        if validate is not None:
            validate(name, dims, seen)
        size = int(np.prod(dims, dtype=np.int64))
        start = r.pos
        r.take(8 * size, f"tensor {name!r} data")
        seen[name] = dims
        table.append((name, dims, start, size))
    (mlen,) = r.unpack("<I", "JSON length")
    try:
        blob = json.loads(r.take(mlen, "JSON blob").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"JSON blob is corrupt: {exc}") from exc
    if r.pos != len(raw):
        raise ContainerError(f"{len(raw) - r.pos} trailing bytes after JSON blob")
    tensors = {
        name: np.frombuffer(raw, dtype="<f8", count=size, offset=start).astype(np.float64).reshape(dims)
        for name, dims, start, size in table
    }
    return tensors, blob


def shape_table(expected: dict[str, tuple[int, ...]]):
    """Validator demanding exactly the given names and shapes."""

    def validate(name, dims, seen):
        if name not in expected:
            raise ContainerShapeError(f"unexpected tensor {name!r} in shape table")
        if tuple(dims) != tuple(expected[name]):
            raise ContainerShapeError(f"tensor {name!r} advertises shape {tuple(dims)}, expected {tuple(expected[name])}")

    return validate


def save(path, tensors: dict[str, np.ndarray], blob: dict) -> None:
    Path(path).write_bytes(encode(tensors, blob))


def load(path, validate=None) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes(), validate)
