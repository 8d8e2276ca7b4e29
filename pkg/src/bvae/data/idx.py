"""IDX binary reader/writer (the MNIST on-disk format).

Layout: 4-byte big-endian magic 0x00000803 (images, ubyte rank 3) or
0x00000801 (labels, ubyte rank 1), one big-endian u32 per dimension, then
raw bytes in row-major order.  Files starting with the gzip prefix
0x1f 0x8b are decompressed transparently.
"""

import gzip
import struct

import numpy as np

from ..errors import DataError

MAGIC_IMAGES = 0x00000803
MAGIC_LABELS = 0x00000801
_GZIP_PREFIX = b"\x1f\x8b"


def _read_bytes(path):
    try:
        with open(path, "rb") as fh:
            head = fh.read(2)
            fh.seek(0)
            if head == _GZIP_PREFIX:
                with gzip.open(fh) as gz:
                    return gz.read()
            return fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def read_idx(path, expected_magic=None):
    """Parse one IDX file into an unsigned-byte ndarray."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise DataError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dtype_code = (magic >> 8) & 0xFF
    ndim = magic & 0xFF
    if dtype_code != 0x08:
        raise DataError(f"{path}: unsupported IDX element type 0x{dtype_code:02x}")
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataError(f"{path}: truncated IDX dimension list")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims)) if dims else 0
    body = raw[header_len:]
    if len(body) < count:
        raise DataError(f"{path}: truncated IDX payload ({len(body)} of {count} bytes)")
    if len(body) > count:
        raise DataError(f"{path}: {len(body) - count} trailing bytes after IDX payload")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    """Write a uint8 array as IDX (used for fixtures and cached exports)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = (0x08 << 8) | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        for d in arr.shape:
            fh.write(struct.pack(">I", d))
        fh.write(arr.tobytes())


def load_idx(images_path, labels_path):
    """Load an image/label IDX pair into ([N,H,W,1] float32 in [0,1], [N] int64)."""
    images = read_idx(images_path, expected_magic=MAGIC_IMAGES)
    labels = read_idx(labels_path, expected_magic=MAGIC_LABELS)
    if images.shape[0] != labels.shape[0]:
        raise DataError(
            f"image count {images.shape[0]} != label count {labels.shape[0]} "
            f"({images_path} / {labels_path})")
    pixels = (images.astype(np.float32) / 255.0)[..., None]
    return pixels, labels.astype(np.int64)
