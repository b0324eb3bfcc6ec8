"""Writer for the binary tensor interchange format.

Deliberately independent of the consumer package's implementation: the format
is the cross-component contract (magic "FOMO", u32 little-endian dtype code
0=float32, u32 ndim, u64 extents, row-major little-endian payload), and the
golden-fixture tests check that files written here load over there.
"""

import struct

import numpy as np

MAGIC = b"FOMO"
FLOAT32 = 0


class TensorWriteError(Exception):
    pass


def write_tensor(path, matrix) -> None:
    arr = np.ascontiguousarray(matrix, dtype="<f4")
    if arr.ndim not in (1, 2):
        raise TensorWriteError(f"tensor must be 1-D or 2-D, got ndim={arr.ndim}")
    if any(d < 1 for d in arr.shape):
        raise TensorWriteError(f"empty dimension in shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise TensorWriteError("non-finite values cannot be serialized")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FLOAT32, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    """Minimal reader for self-checks; the consumer package has the real one."""
    with open(path, "rb") as fh:
        blob = fh.read()
    magic = blob[:4]
    if magic != MAGIC:
        raise TensorWriteError(f"bad magic {magic!r}")
    dtype_code, ndim = struct.unpack_from("<II", blob, 4)
    if dtype_code != FLOAT32:
        raise TensorWriteError(f"unsupported dtype code {dtype_code}")
    dims = struct.unpack_from(f"<{ndim}Q", blob, 12)
    payload = blob[12 + 8 * ndim:]
    if len(payload) != 4 * int(np.prod(dims)):
        raise TensorWriteError("payload size does not match dims")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
