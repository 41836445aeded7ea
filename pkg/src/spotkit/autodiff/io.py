"""Tensor file format: one JSON header line, then little-endian float32 row-major data.

    {"shape":[2,3],"dtype":"f32"}\\n<24 bytes>
"""
from __future__ import annotations

import json
import os

import numpy as np

_LE_F32 = np.dtype("<f4")


class IntegrityError(IOError):
    """A stored file is malformed, truncated, or inconsistent with its manifest."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    header = json.dumps({"shape": list(arr.shape), "dtype": "f32"}, separators=(",", ":"))
    return header.encode("utf-8") + b"\n" + np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    newline = blob.find(b"\n")
    if newline < 0:
        raise IntegrityError(f"{source}: missing header line")
    try:
        header = json.loads(blob[:newline].decode("utf-8"))
        shape = tuple(int(n) for n in header["shape"])
        dtype = header["dtype"]
    except (ValueError, KeyError, TypeError) as exc:
        raise IntegrityError(f"{source}: bad header ({exc})") from None
    if dtype != "f32":
        raise IntegrityError(f"{source}: unsupported dtype {dtype!r}")
    payload = blob[newline + 1:]
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(payload) != expected:
        raise IntegrityError(f"{source}: expected {expected} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=_LE_F32).reshape(shape).astype(np.float32)


def save_tensor(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_tensor(array))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except FileNotFoundError:
        raise IntegrityError(f"{os.fspath(path)}: missing tensor file") from None
    return decode_tensor(blob, os.fspath(path))
