"""Binary PGM (P5, maxval 255) writer for component images."""
from pathlib import Path

import numpy as np

from core.errors import InputError


def to_bytes(values) -> np.ndarray:
    """Map [0,1] values to bytes with round-half-up: 0.5 -> 128."""
    values = np.clip(np.asarray(values, dtype=float), 0.0, 1.0)
    return np.floor(255.0 * values + 0.5).astype(np.uint8)


def min_max_normalize(values) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    low, high = values.min(), values.max()
    if high - low <= 0:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def encode_pgm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2:
        raise InputError(f"expected a 2-D image, got shape {image.shape}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    return header + to_bytes(image).tobytes()


def write_pgm(path, image):
    """Save a 2-D array of [0,1] values as a binary PGM."""
    Path(path).write_bytes(encode_pgm(image))
