"""Checkpoint container: named float64 arrays in a little-endian binary file.

Layout: 6-byte magic "TXTGD1", then one record per array in sorted name
order.  Record: u32 name length, UTF-8 name, u32 ndim, u32 per dimension,
then the values as little-endian float64 in C order.  Sorted order plus
fixed-width fields make the byte stream a pure function of the contents,
and float64 round-trips bit-exactly.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError
from .nn import ParameterRegistry

__all__ = ["MAGIC", "save_checkpoint", "load_checkpoint", "registry_state", "restore_registry", "pack_meta", "unpack_meta"]

MAGIC = b"TXTGD1"


def save_checkpoint(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays; atomic via temp file + rename."""
    chunks = [MAGIC]
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    pos = len(MAGIC)
    out: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise DataError(f"{path}: truncated checkpoint")
        pos += n
        return raw[pos - n:pos]

    while pos < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        out[name] = values.astype(np.float64)
    return out


def pack_meta(text: str) -> np.ndarray:
    """Store a short string as a float64 array of byte values."""
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.float64)


def unpack_meta(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.float64).astype(np.uint8).tobytes().decode("utf-8")


def registry_state(reg: ParameterRegistry, meta: dict[str, str] | None = None) -> dict[str, np.ndarray]:
    """Parameters plus optimizer moments and step counters, ready to save."""
    state: dict[str, np.ndarray] = {}
    for p in reg.values():
        state[f"param/{p.name}"] = p.tensor.data
        state[f"adam_m/{p.name}"] = p.m
        state[f"adam_v/{p.name}"] = p.v
        state[f"adam_t/{p.name}"] = np.array([float(p.step)])
    for key, text in (meta or {}).items():
        state[f"meta/{key}"] = pack_meta(text)
    return state


def restore_registry(reg: ParameterRegistry, state: dict[str, np.ndarray]) -> dict[str, str]:
    """Load parameters and optimizer state in place; returns the meta strings.

    Every registered parameter must be present with a matching shape.
    """
    meta: dict[str, str] = {}
    for name, arr in state.items():
        if name.startswith("meta/"):
            meta[name[len("meta/"):]] = unpack_meta(arr)
    for p in reg.values():
        key = f"param/{p.name}"
        if key not in state:
            raise DataError(f"checkpoint is missing parameter {p.name!r}")
        if state[key].shape != p.tensor.data.shape:
            raise DataError(
                f"checkpoint shape {state[key].shape} for {p.name!r} does not match model shape {p.tensor.data.shape}")
        p.tensor.data = state[key].copy()
        p.m = state.get(f"adam_m/{p.name}", np.zeros_like(p.tensor.data)).copy()
        p.v = state.get(f"adam_v/{p.name}", np.zeros_like(p.tensor.data)).copy()
        step_arr = state.get(f"adam_t/{p.name}")
        p.step = int(step_arr[0]) if step_arr is not None else 0
    return meta
