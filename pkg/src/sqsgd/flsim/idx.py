"""Reader for the IDX container used by MNIST-family datasets."""

from __future__ import annotations

import gzip
from pathlib import Path

import numpy as np

LABELS_MAGIC = 0x00000801
IMAGES_MAGIC = 0x00000803


class IdxError(ValueError):
    pass


class IdxMagicError(IdxError):
    pass


class IdxTruncatedError(IdxError):
    pass


class LabelRangeError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such IDX file: {path}")
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(data: bytes, num_classes: int | None = 10) -> np.ndarray:
    """Decode IDX bytes.

    Images come back as float64 in ``[0, 1]`` with shape ``(n, rows, cols)``;
    labels as int64 with shape ``(n,)``, checked against ``num_classes``.
    """
    if len(data) < 4:
        raise IdxTruncatedError("file shorter than the magic number")
    magic = int.from_bytes(data[:4], "big")
    if magic == LABELS_MAGIC:
        ndim = 1
    elif magic == IMAGES_MAGIC:
        ndim = 3
    else:
        raise IdxMagicError(f"bad magic number 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError("header truncated")
    shape = tuple(int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim))
    count = int(np.prod(shape))
    body = data[header:]
    if len(body) < count:
        raise IdxTruncatedError(f"expected {count} data bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8, count=count).reshape(shape)
    if ndim == 1:
        labels = arr.astype(np.int64)
        if num_classes is not None and labels.size and labels.max() >= num_classes:
            raise LabelRangeError(f"label {labels.max()} out of range for {num_classes} classes")
        return labels
    return arr.astype(np.float64) / 255.0


def load_idx(path, num_classes: int | None = 10) -> np.ndarray:
    return parse_idx(_read_bytes(path), num_classes)


def write_idx(path, array) -> None:
    """Write uint8 data as IDX; 1-D arrays as labels, 3-D as images."""
    arr = np.asarray(array)
    if arr.ndim == 1:
        magic = LABELS_MAGIC
    elif arr.ndim == 3:
        magic = IMAGES_MAGIC
    else:
        raise ValueError("IDX writer supports 1-D labels or 3-D images")
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0 if arr.dtype.kind == "f" else arr), 0, 255).astype(np.uint8)
    head = magic.to_bytes(4, "big") + b"".join(int(s).to_bytes(4, "big") for s in arr.shape)
    Path(path).write_bytes(head + arr.tobytes())
