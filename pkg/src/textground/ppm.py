"""Binary PPM (P6) and PGM (P5) image files, 8 bits per sample.

Pixel values map [0,1] floats to 0..255 by round(255*v); writes go through
a temp file and an atomic rename so readers never see partial output.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError

__all__ = ["write_ppm", "read_ppm", "write_pgm", "read_pgm"]


def _quantize(arr: np.ndarray) -> np.ndarray:
    return np.rint(255.0 * np.clip(arr, 0.0, 1.0)).astype(np.uint8)


def _atomic_write(path: str, payload: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(payload)
    os.replace(tmp, path)


def write_ppm(path: str, image: np.ndarray) -> None:
    """Write an [h, w, 3] float image in [0,1] as binary P6."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DataError(f"P6 needs an [h, w, 3] image, got shape {arr.shape}")
    h, w = arr.shape[:2]
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + _quantize(arr).tobytes())


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write an [h, w] float image in [0,1] as binary P5."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 2:
        raise DataError(f"P5 needs an [h, w] image, got shape {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    _atomic_write(path, header + _quantize(arr).tobytes())


def _read_header(raw: bytes, magic: bytes):
    # header tokens may be separated by any whitespace; # starts a comment line
    if not raw.startswith(magic):
        raise DataError(f"expected {magic.decode()} header")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if pos == start:
            raise DataError("truncated header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(f) for f in fields)
    if maxval != 255:
        raise DataError(f"only maxval 255 is supported, got {maxval}")
    return w, h, pos


def read_ppm(path: str) -> np.ndarray:
    """Read a binary P6 file into an [h, w, 3] float image in [0,1]."""
    with open(path, "rb") as f:
        raw = f.read()
    w, h, pos = _read_header(raw, b"P6")
    body = raw[pos:pos + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError(f"pixel payload is {len(body)} bytes, expected {3 * w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def read_pgm(path: str) -> np.ndarray:
    """Read a binary P5 file into an [h, w] float image in [0,1]."""
    with open(path, "rb") as f:
        raw = f.read()
    w, h, pos = _read_header(raw, b"P5")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise DataError(f"pixel payload is {len(body)} bytes, expected {w * h}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float64) / 255.0
