"""Binary PPM (P6) / PGM (P5) read and write."""
from __future__ import annotations

from pathlib import Path

import numpy as np


def to_bytes(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write a (3, H, W) float image in [0, 1] as P6."""
    _, h, w = image.shape
    data = to_bytes(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data)


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a binary (H, W) mask as P5 with values 0/255."""
    h, w = mask.shape
    data = (np.asarray(mask, dtype=bool).astype(np.uint8) * 255).tobytes()
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data)


def _parse_header(raw: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if not raw.startswith(magic):
        raise ValueError(f"not a {magic.decode()} file")
    fields, pos = [], len(magic)
    while len(fields) < 3:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    w, h, maxval = fields
    return w, h, maxval, pos + 1


def read_ppm(path) -> np.ndarray:
    """Read P6 into a (3, H, W) uint8 array."""
    raw = Path(path).read_bytes()
    w, h, maxval, off = _parse_header(raw, b"P6")
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    body = np.frombuffer(raw, dtype=np.uint8, count=3 * w * h, offset=off)
    return body.reshape(h, w, 3).transpose(2, 0, 1).copy()


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    w, h, maxval, off = _parse_header(raw, b"P5")
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()
