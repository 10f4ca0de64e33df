"""Binary tensor files: "PSAT" magic, u32 version, dims, float32 payload.

Layout (all integers little-endian):
  bytes 0..3    magic b"PSAT"
  bytes 4..7    version, u32, currently 1
  bytes 8..11   ndims, u32
  then          ndims x u64 dimension sizes
  then          prod(dims) float32 values, row-major

Round trips are byte-exact; computation happens in float64 but files
always store float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import TensorFileError, ValidationError

MAGIC = b"PSAT"
VERSION = 1
MAX_NDIMS = 8


def write_tensor(path, array) -> None:
    """Serialize ``array`` (any float array-like) to ``path``."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim < 1 or arr.ndim > MAX_NDIMS:
        raise ValidationError(f"tensor rank {arr.ndim} outside 1..{MAX_NDIMS}")
    if arr.size == 0:
        raise ValidationError("refusing to write an empty tensor")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains NaN or Inf entries")
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    header = MAGIC + struct.pack("<II", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    Path(path).write_bytes(header + payload)


def read_tensor(path) -> np.ndarray:
    """Parse a tensor file back into a float64 array."""
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise TensorFileError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise TensorFileError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, ndims = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise TensorFileError(f"{path}: version {version}, expected {VERSION}")
    if ndims < 1 or ndims > MAX_NDIMS:
        raise TensorFileError(f"{path}: ndims {ndims} outside 1..{MAX_NDIMS}")
    dims_end = 12 + 8 * ndims
    if len(blob) < dims_end:
        raise TensorFileError(f"{path}: truncated dimension list")
    dims = struct.unpack_from(f"<{ndims}Q", blob, 12)
    count = 1
    for d in dims:
        if d == 0:
            raise TensorFileError(f"{path}: zero-length dimension in {dims}")
        count *= d
    expected = dims_end + 4 * count
    if len(blob) < expected:
        raise TensorFileError(
            f"{path}: truncated payload ({len(blob) - dims_end} of "
            f"{4 * count} bytes)"
        )
    if len(blob) > expected:
        raise TensorFileError(
            f"{path}: {len(blob) - expected} trailing bytes after payload"
        )
    values = np.frombuffer(blob, dtype="<f4", count=count, offset=dims_end)
    arr = values.reshape(dims).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise TensorFileError(f"{path}: payload contains NaN or Inf")
    return arr
