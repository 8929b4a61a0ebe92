"""Portable tensor files (``.cvrt``).

Layout, all integers little-endian::

    magic   4 bytes   b"CVRT"
    version u32       currently 1
    dtype   u32       0 = f32, 1 = f64, 2 = bool (one byte per element), 3 = c64
    rank    u32
    dims    u64 * rank
    payload row-major, little-endian, product(dims) * itemsize bytes

Nothing may follow the payload.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from ..errors import ArtifactError

MAGIC = b"CVRT"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("|b1"), 3: np.dtype("<c8")}
CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(bool): 2, np.dtype(np.complex64): 3}
_HEAD = struct.Struct("<4sIII")


class CorruptTensorError(ArtifactError):
    """The file is not a readable tensor file."""


def _as_array(tensor) -> np.ndarray:
    if isinstance(tensor, torch.Tensor):
        tensor = tensor.detach().cpu().numpy()
    arr = np.asarray(tensor)
    if arr.dtype == np.complex128:
        arr = arr.astype(np.complex64)
    if arr.dtype not in CODES:
        raise ArtifactError(f"dtype {arr.dtype} cannot be stored; use f32, f64, bool or c64")
    return arr


def encode_tensor(tensor) -> bytes:
    arr = _as_array(tensor)
    code = CODES[arr.dtype]
    head = _HEAD.pack(MAGIC, VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()


def decode_tensor(buf: bytes, name: str = "<buffer>") -> np.ndarray:
    if len(buf) < _HEAD.size:
        raise CorruptTensorError(f"{name}: truncated header ({len(buf)} bytes)")
    magic, version, code, rank = _HEAD.unpack_from(buf)
    if magic != MAGIC:
        raise CorruptTensorError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CorruptTensorError(f"{name}: unsupported version {version}")
    if code not in DTYPES:
        raise CorruptTensorError(f"{name}: unknown dtype code {code}")
    off = _HEAD.size + 8 * rank
    if len(buf) < off:
        raise CorruptTensorError(f"{name}: truncated dims")
    dims = struct.unpack_from(f"<{rank}Q", buf, _HEAD.size)
    dt = DTYPES[code]
    need = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    have = len(buf) - off
    if have != need:
        kind = "truncated" if have < need else "trailing bytes after"
        raise CorruptTensorError(f"{name}: {kind} payload ({have} bytes, expected {need})")
    arr = np.frombuffer(buf, dtype=dt, offset=off, count=need // dt.itemsize).reshape(dims)
    return arr.astype(dt.newbyteorder("="), copy=True)


def write_tensor(path, tensor) -> Path:
    """Write ``tensor`` (numpy array or torch tensor); complex128 is narrowed to c64."""
    path = Path(path)
    data = encode_tensor(tensor)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    return path


def read_tensor(path) -> np.ndarray:
    """Read a tensor file into a fresh numpy array."""
    path = Path(path)
    if not path.exists():
        raise ArtifactError(f"tensor file not found: {path}")
    return decode_tensor(path.read_bytes(), str(path))
