"""
IDX binary codec (big-endian 32-bit header words, then raw bytes).

Images use magic 0x00000803 with dimensions (N, rows, cols); labels use
0x00000801 with dimension (N). Files ending in ``.gz`` are read through gzip.
"""
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

from core.errors import DataFormatError, InputError

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

PathLike = Union[str, Path]


@dataclass
class Dataset:
    """Points in [0,1]^n with integer class labels."""
    points: np.ndarray
    labels: np.ndarray
    n_classes: int
    shape: tuple = ()

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.labels = np.asarray(self.labels, dtype=int)
        if self.labels.shape != (self.points.shape[0],):
            raise InputError(f"{self.points.shape[0]} points but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError(f"labels must lie in [0, {self.n_classes})")
        if np.any(self.points < 0) or np.any(self.points > 1):
            raise InputError("points must lie in [0,1]^n")
        if not self.shape:
            self.shape = (self.points.shape[1],)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[1]

    @property
    def C(self) -> int:
        return self.n_classes


def _read_bytes(path: PathLike) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"IDX file not found: {path}")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def _header(data: bytes, path: PathLike, expected_magic: int, n_dims: int, field: str):
    size = 4 * (1 + n_dims)
    if len(data) < size:
        raise DataFormatError(f"{path}: {field}.header truncated ({len(data)} bytes)")
    magic, *dims = struct.unpack(f">{1 + n_dims}I", data[:size])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: {field}.magic is 0x{magic:08x}, expected 0x{expected_magic:08x}")
    return dims, data[size:]


def read_idx_images(path: PathLike) -> np.ndarray:
    """Raw uint8 images of shape (N, rows, cols)."""
    data = _read_bytes(path)
    (count, rows, cols), payload = _header(data, path, IMAGE_MAGIC, 3, "images")
    expected = count * rows * cols
    if len(payload) != expected:
        raise DataFormatError(f"{path}: images.payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path: PathLike) -> np.ndarray:
    data = _read_bytes(path)
    (count,), payload = _header(data, path, LABEL_MAGIC, 1, "labels")
    if len(payload) != count:
        raise DataFormatError(f"{path}: labels.payload has {len(payload)} bytes, expected {count}")
    return np.frombuffer(payload, dtype=np.uint8).copy()


def load_idx(images_path: PathLike, labels_path: PathLike, n_classes: int = None) -> Dataset:
    """Load an IDX image/label pair; pixels are divided by 255."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: {images_path} has {images.shape[0]} images, {labels_path} has {labels.shape[0]} labels"
        )
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 1
    points = images.reshape(images.shape[0], -1).astype(float) / 255.0
    logger.info(f"Loaded {images.shape[0]} images of {images.shape[1]}x{images.shape[2]} from {images_path}")
    return Dataset(points=points, labels=labels.astype(int), n_classes=n_classes, shape=images.shape[1:])


def encode_idx_images(images: np.ndarray) -> bytes:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise InputError("expected uint8 images of shape (N, rows, cols)")
    return struct.pack(">4I", IMAGE_MAGIC, *images.shape) + images.tobytes()


def encode_idx_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.ndim != 1 or np.any(labels < 0) or np.any(labels > 255):
        raise InputError("labels must be a vector of values in [0, 255]")
    return struct.pack(">2I", LABEL_MAGIC, labels.shape[0]) + labels.astype(np.uint8).tobytes()


def save_idx(dataset: Dataset, images_path: PathLike, labels_path: PathLike):
    """Write the pair back; pixels are rounded to the nearest multiple of 1/255."""
    if len(dataset.shape) == 2:
        rows, cols = dataset.shape
    else:
        rows, cols = 1, dataset.n
    pixels = np.floor(dataset.points * 255.0 + 0.5).astype(np.uint8).reshape(dataset.N, rows, cols)
    for path, payload in ((images_path, encode_idx_images(pixels)), (labels_path, encode_idx_labels(dataset.labels))):
        path = Path(path)
        if path.suffix == ".gz":
            with gzip.open(path, "wb") as f:
                f.write(payload)
        else:
            path.write_bytes(payload)
    logger.info(f"Wrote {dataset.N} samples to {images_path}")
