"""Binary PGM (P5) and PPM (P6) image files with maxval 255."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def read_pixmap(path) -> np.ndarray:
    """Read a P5/P6 file into a uint8 array, [H, W] or [H, W, 3]."""
    blob = Path(path).read_bytes()
    magic, pos = _read_token(blob, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported pixmap magic {magic!r} in {path}")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(blob, pos)
        fields.append(int(tok))
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    # exactly one whitespace byte separates the header from pixel data
    data = blob[pos + 1:]
    need = width * height * channels
    if len(data) < need:
        raise ValueError(f"pixmap truncated: need {need} bytes, have {len(data)}")
    arr = np.frombuffer(data[:need], dtype=np.uint8)
    if channels == 1:
        return arr.reshape(height, width).copy()
    return arr.reshape(height, width, 3).copy()


def _read_token(blob: bytes, pos: int):
    """Next header token, skipping whitespace and # comments."""
    n = len(blob)
    while pos < n:
        c = blob[pos:pos + 1]
        if c == b"#":
            while pos < n and blob[pos:pos + 1] != b"\n":
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not blob[pos:pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError("pixmap header ended unexpectedly")
    return blob[start:pos], pos


def write_pixmap(path, img: np.ndarray) -> None:
    """Write uint8 [H, W] as P5 or [H, W, 3] as P6."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise ValueError("pixmap pixels must be uint8; convert before writing")
    if img.ndim == 2:
        magic, (h, w) = b"P5", img.shape
    elif img.ndim == 3 and img.shape[2] == 3:
        magic, (h, w) = b"P6", img.shape[:2]
    else:
        raise ValueError(f"cannot write array of shape {img.shape} as a pixmap")
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    Path(path).write_bytes(header + img.tobytes())
