"""SEGV array files.

Layout (little-endian)::

    offset  size  field
    0       4     magic b"SEGV"
    4       1     version (1)
    5       1     dtype code (1 float32, 2 complex64, 3 float64, 4 complex128)
    6       2     ndim (uint16, at most 6)
    8       24    six uint32 dims; unused trailing dims are 0
    32      ...   raw values in C order; complex as interleaved (re, im)
"""

import struct
from pathlib import Path

import numpy as np

from .errors import UsageError

MAGIC = b"SEGV"
VERSION = 1
MAX_DIMS = 6
_HEADER = struct.Struct("<4sBBH6I")
assert _HEADER.size == 32

DTYPE_CODES = {
    1: np.dtype("<f4"),
    2: np.dtype("<c8"),
    3: np.dtype("<f8"),
    4: np.dtype("<c16"),
}
_CODE_OF = {v: k for k, v in DTYPE_CODES.items()}


def write_array(path, arr) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _CODE_OF:
        raise UsageError(f"cannot store dtype {arr.dtype} in a SEGV file")
    if arr.ndim > MAX_DIMS:
        raise UsageError(f"SEGV files hold at most {MAX_DIMS} dimensions")
    dims = list(arr.shape) + [0] * (MAX_DIMS - arr.ndim)
    header = _HEADER.pack(MAGIC, VERSION, _CODE_OF[dt], arr.ndim, *dims)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def read_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise UsageError(f"{path}: file too short for a SEGV header")
    magic, version, code, ndim, *dims = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise UsageError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UsageError(f"{path}: unsupported version {version}")
    if code not in DTYPE_CODES or ndim > MAX_DIMS:
        raise UsageError(f"{path}: bad dtype code {code} or ndim {ndim}")
    shape = tuple(dims[:ndim])
    dt = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise UsageError(f"{path}: payload is {len(body)} bytes, header implies {expected}")
    return np.frombuffer(body, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
