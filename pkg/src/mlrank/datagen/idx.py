"""IDX binary tensors (the MNIST distribution format).

Layout, all integers big-endian::

    u8 0, u8 0, u8 type code, u8 ndim
    u32 dim[0] ... u32 dim[ndim-1]
    payload: prod(dims) elements of the given type, row-major
"""

from __future__ import annotations

import gzip
import os
import struct
from pathlib import Path

import numpy as np

TYPE_CODES = {
    0x08: np.dtype("u1"),
    0x09: np.dtype("i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagic(IdxFormatError):
    pass


class TruncatedIdx(IdxFormatError):
    pass


class UnsupportedElementType(IdxFormatError):
    pass


def parse_idx(data: bytes) -> np.ndarray:
    if len(data) < 4:
        raise TruncatedIdx(f"stream too short for an IDX header ({len(data)} bytes)")
    zero0, zero1, code, ndim = data[0], data[1], data[2], data[3]
    if zero0 != 0 or zero1 != 0:
        raise BadMagic(f"bad magic 0x{int.from_bytes(data[:4], 'big'):08x}: leading bytes must be zero")
    if code not in TYPE_CODES:
        raise UnsupportedElementType(f"unsupported element type code 0x{code:02x}")
    if ndim == 0:
        raise BadMagic("IDX tensor must have at least one dimension")
    header_len = 4 + 4 * ndim
    if len(data) < header_len:
        raise TruncatedIdx(f"header declares {ndim} dims but stream has {len(data)} bytes")
    dims = struct.unpack(f">{ndim}I", data[4:header_len])
    dtype = TYPE_CODES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    payload = len(data) - header_len
    if payload < expected:
        raise TruncatedIdx(f"payload has {payload} bytes, dims {dims} need {expected}")
    if payload > expected:
        raise IdxFormatError(f"{payload - expected} trailing bytes after payload of dims {dims}")
    arr = np.frombuffer(data, dtype=dtype, offset=header_len).reshape(dims)
    return arr.astype(dtype.newbyteorder("="))


def write_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    for code, dt in TYPE_CODES.items():
        if arr.dtype.kind == dt.kind and arr.dtype.itemsize == dt.itemsize:
            break
    else:
        raise UnsupportedElementType(f"no IDX type code for dtype {arr.dtype}")
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes()


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


MNIST_ENV = "MLRANK_MNIST_DIR"
_IMAGE_NAMES = ("train-images-idx3-ubyte", "train-images.idx3-ubyte")
_LABEL_NAMES = ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte")


def _find(directory: Path, names) -> Path:
    for name in names:
        for suffix in ("", ".gz"):
            p = directory / (name + suffix)
            if p.exists():
                return p
    raise FileNotFoundError(f"none of {names} found in {directory}")


def load_mnist(directory=None) -> tuple[np.ndarray, np.ndarray]:
    """Training images ``(n, 28, 28)`` u8 and labels ``(n,)`` from a directory.

    The directory defaults to ``$MLRANK_MNIST_DIR``.
    """
    directory = directory or os.environ.get(MNIST_ENV)
    if not directory:
        raise FileNotFoundError(f"no MNIST directory given and ${MNIST_ENV} is unset")
    directory = Path(directory)
    images = read_idx_file(_find(directory, _IMAGE_NAMES))
    labels = read_idx_file(_find(directory, _LABEL_NAMES))
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"incompatible MNIST files: images {images.shape}, labels {labels.shape}")
    return images, labels


def surrogate_mnist(per_class: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """MNIST stand-in built from scikit-learn's bundled 8x8 digits.

    Each 8x8 digit is bilinearly upsampled to a 20x20 glyph and padded to
    28x28, matching MNIST's framing. Used when no MNIST files are available.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    imgs, labels = digits.images, digits.target
    if per_class is not None:
        keep = np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in range(10)])
        imgs, labels = imgs[keep], labels[keep]
    out = np.zeros((len(imgs), 28, 28), dtype=np.uint8)
    for i, im in enumerate(imgs):
        up = ndimage.zoom(im / 16.0, 20 / 8, order=1)
        out[i, 4:24, 4:24] = np.clip(np.round(up * 255), 0, 255).astype(np.uint8)
    return out, labels.astype(np.uint8)
