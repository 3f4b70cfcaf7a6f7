"""Binary tensor container: ``M2HX-TNS1`` magic, a text header line, raw LE values."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np

MAGIC = b"M2HX-TNS1\n"
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype("float32"): "f32", np.dtype("float64"): "f64"}


class CorruptContainerError(ValueError):
    pass


def encode(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype not in _NAMES:
        arr = arr.astype(np.float64)
    tag = _NAMES[arr.dtype]
    header = f"dtype={tag} shape={','.join(str(d) for d in arr.shape)}\n".encode("utf-8")
    return MAGIC + header + np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()


def decode(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if not buf.startswith(MAGIC):
        raise CorruptContainerError(f"{source}: bad magic")
    end = buf.find(b"\n", len(MAGIC))
    if end < 0:
        raise CorruptContainerError(f"{source}: missing header line")
    try:
        fields = dict(item.split("=", 1) for item in buf[len(MAGIC):end].decode("utf-8").split())
        dtype = _DTYPES[fields["dtype"]]
        shape = tuple(int(d) for d in fields["shape"].split(",") if d)
    except (KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptContainerError(f"{source}: malformed header") from exc
    payload = buf[end + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise CorruptContainerError(f"{source}: expected {expected} payload bytes, found {len(payload)}")
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def save(path: str | os.PathLike, arr) -> None:
    data = arr.data if hasattr(arr, "data") and not isinstance(arr, np.ndarray) else arr
    Path(path).write_bytes(encode(np.asarray(data)))


def load(path: str | os.PathLike) -> np.ndarray:
    p = Path(path)
    return decode(p.read_bytes(), str(p))
