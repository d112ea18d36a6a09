import logging

import numpy as np

from core.errors import InputError
from utils.idx import Dataset

logger = logging.getLogger(__name__)

BLOB_RADIUS = 0.3


def blob_centers(n_classes: int, n_features: int = 2) -> np.ndarray:
    """Fixed centres on a circle of radius 0.3 around 0.5 in the first two dimensions."""
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = np.full((n_classes, n_features), 0.5)
    centers[:, 0] += BLOB_RADIUS * np.cos(angles)
    if n_features > 1:
        centers[:, 1] += BLOB_RADIUS * np.sin(angles)
    return centers


def make_blobs(n_classes: int, per_class: int, spread: float, seed: int, n_features: int = 2) -> Dataset:
    """Isotropic Gaussian clusters around fixed distinct centres, clipped to [0,1]."""
    if n_classes < 1 or per_class < 1 or n_features < 1:
        raise InputError("n_classes, per_class and n_features must be positive")
    if spread < 0:
        raise InputError(f"spread must be nonnegative, got {spread}")
    rng = np.random.Generator(np.random.MT19937(seed))
    centers = blob_centers(n_classes, n_features)
    labels = np.repeat(np.arange(n_classes), per_class)
    points = centers[labels] + spread * rng.standard_normal((labels.size, n_features))
    return Dataset(points=np.clip(points, 0.0, 1.0), labels=labels, n_classes=n_classes)
