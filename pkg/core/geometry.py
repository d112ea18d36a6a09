"""
Distance functions and affine-subspace machinery.

Scalar helpers operate on single points and are what the rest of the package
uses for checks and certificates; :class:`DistanceComputation` is the batched
kernel (N inputs against K components) used by training and attacks, and
carries enough intermediate state to run its own backward pass.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from scipy.linalg import polar, svd

from core.errors import InputError, NumericalError, PreconditionError

logger = logging.getLogger(__name__)

ORTHONORMAL_TOLERANCE = 1e-6
RANK_TOLERANCE = 1e-10


class DistanceKind(str, Enum):
    EUCLIDEAN = "euclidean"
    SQUARED_EUCLIDEAN = "squared_euclidean"
    TANGENT = "tangent"
    SQUARED_TANGENT = "squared_tangent"
    CONSTRAINED_TANGENT = "constrained_tangent"

    @property
    def is_squared(self) -> bool:
        return self in (DistanceKind.SQUARED_EUCLIDEAN, DistanceKind.SQUARED_TANGENT)

    @property
    def is_tangent(self) -> bool:
        return self in (
            DistanceKind.TANGENT,
            DistanceKind.SQUARED_TANGENT,
            DistanceKind.CONSTRAINED_TANGENT,
        )

    @property
    def unsquared(self) -> "DistanceKind":
        if self is DistanceKind.SQUARED_EUCLIDEAN:
            return DistanceKind.EUCLIDEAN
        if self is DistanceKind.SQUARED_TANGENT:
            return DistanceKind.TANGENT
        return self


@dataclass(frozen=True)
class AffineSubspace:
    """The set {translation + basis @ theta}; basis columns are orthonormal."""
    translation: np.ndarray
    basis: np.ndarray

    def __post_init__(self):
        translation = np.asarray(self.translation, dtype=float)
        basis = np.asarray(self.basis, dtype=float)
        if basis.ndim == 1 and basis.size == 0:
            basis = np.zeros((translation.shape[0], 0))
        if basis.ndim != 2 or basis.shape[0] != translation.shape[0]:
            raise InputError(
                f"basis shape {basis.shape} does not match translation length {translation.shape[0]}"
            )
        if basis.shape[1] >= basis.shape[0] and basis.shape[0] > 0:
            raise PreconditionError(f"subspace dimension {basis.shape[1]} must be smaller than {basis.shape[0]}")
        drift = orthonormality_error(basis)
        if drift > ORTHONORMAL_TOLERANCE:
            raise PreconditionError(f"basis is not orthonormal: ||W^T W - I||_F = {drift:.3e}")
        object.__setattr__(self, "translation", translation)
        object.__setattr__(self, "basis", basis)

    @property
    def r(self) -> int:
        return self.basis.shape[1]


Component = Union[np.ndarray, AffineSubspace]


def _as_pair(x, y) -> Tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise InputError(f"dimension mismatch: {x.shape} vs {y.shape}")
    return x, y


def orthonormality_error(basis: np.ndarray) -> float:
    basis = np.asarray(basis, dtype=float)
    r = basis.shape[-1]
    if r == 0:
        return 0.0
    gram = np.swapaxes(basis, -1, -2) @ basis
    return float(np.max(np.linalg.norm(gram - np.eye(r), axis=(-2, -1))))


def euclidean_distance(x, y) -> float:
    x, y = _as_pair(x, y)
    return float(np.linalg.norm(x - y))


def project_onto_subspace(x, s: AffineSubspace) -> np.ndarray:
    x, w = _as_pair(x, s.translation)
    W = s.basis
    return w + W @ (W.T @ (x - w))


def tangent_distance(x, s: AffineSubspace) -> float:
    x, w = _as_pair(x, s.translation)
    return float(np.linalg.norm(projector(s.basis) @ (x - w)))


def constrained_tangent_distance(x, s: AffineSubspace, gamma: float) -> float:
    if gamma is None or gamma <= 0:
        raise InputError(f"constraint radius must be positive, got {gamma}")
    best = project_onto_subspace(x, s)
    inside = euclidean_distance(x, best)
    excess = max(0.0, euclidean_distance(s.translation, best) - gamma)
    return float(np.sqrt(inside ** 2 + excess ** 2))


def orthonormalize_basis(m) -> np.ndarray:
    """Orthonormal basis of the same column space via the polar factor."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise InputError(f"expected an n x r matrix, got shape {m.shape}")
    if m.shape[1] == 0:
        return m.copy()
    singular = svd(m, compute_uv=False)
    if singular[-1] <= RANK_TOLERANCE * max(singular[0], 1.0):
        raise NumericalError(
            f"rank-deficient basis: singular values range {singular[0]:.3e} .. {singular[-1]:.3e}"
        )
    u, _ = polar(m)
    return u


def projector(basis: np.ndarray) -> np.ndarray:
    """The orthogonal projector I - W W^T onto the complement of span(W)."""
    basis = np.asarray(basis, dtype=float)
    return np.eye(basis.shape[0]) - basis @ basis.T


def component_distance(x, component: Component, kind: DistanceKind,
                       constraint_radius: Optional[float] = None) -> float:
    """Distance of the given kind between x and one component (squared kinds squared)."""
    kind = DistanceKind(kind)
    base = kind.unsquared
    if isinstance(component, AffineSubspace):
        if base is DistanceKind.CONSTRAINED_TANGENT:
            value = constrained_tangent_distance(x, component, constraint_radius)
        elif base is DistanceKind.TANGENT:
            value = tangent_distance(x, component)
        else:
            value = euclidean_distance(x, component.translation)
    else:
        value = euclidean_distance(x, component)
    return value ** 2 if kind.is_squared else value


class DistanceComputation:
    """
    Distances from a batch of inputs to every component.

    ``dist`` always holds the non-squared distance; ``kernel`` is what the
    detection function sees (the square of ``dist`` for squared kinds).
    """

    def __init__(self, X: np.ndarray, translations: np.ndarray, bases: Optional[np.ndarray],
                 kind: DistanceKind, constraint_radius: Optional[float] = None):
        self.kind = DistanceKind(kind)
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != translations.shape[1]:
            raise InputError(f"input dimension {X.shape[1]} does not match components ({translations.shape[1]})")
        self.bases = bases if self.kind.is_tangent else None
        self.diff = X[:, None, :] - translations[None, :, :]

        if self.bases is None:
            self.dist = np.linalg.norm(self.diff, axis=-1)
        else:
            self.theta = np.einsum("nkd,kdr->nkr", self.diff, self.bases)
            self.proj = np.einsum("nkr,kdr->nkd", self.theta, self.bases)
            self.residual = self.diff - self.proj
            inside = np.linalg.norm(self.residual, axis=-1)
            if self.kind is DistanceKind.CONSTRAINED_TANGENT:
                if constraint_radius is None or constraint_radius <= 0:
                    raise InputError("constrained tangent distance needs a positive constraint radius")
                self.offset = np.linalg.norm(self.proj, axis=-1)
                self.excess = np.maximum(0.0, self.offset - constraint_radius)
                self.dist = np.sqrt(inside ** 2 + self.excess ** 2)
            else:
                self.offset = None
                self.excess = None
                self.dist = inside

        if not np.all(np.isfinite(self.dist)):
            raise NumericalError("non-finite distance encountered")
        self.kernel = self.dist ** 2 if self.kind.is_squared else self.dist

    def backward(self, grad_dist: np.ndarray):
        """
        Gradients of sum(grad_dist * dist) w.r.t. inputs, translations and bases.

        Where a distance is exactly zero the (undefined) derivative is taken as 0.
        """
        safe = np.where(self.dist > 0, self.dist, 1.0)
        scale = np.where(self.dist > 0, grad_dist / safe, 0.0)

        if self.bases is None:
            grad_diff = scale[..., None] * self.diff
            grad_bases = None
        else:
            B = self.bases
            res_coords = np.einsum("nkd,kdr->nkr", self.residual, B)
            grad_diff = self.residual - np.einsum("nkr,kdr->nkd", res_coords, B)
            grad_bases = -(np.einsum("nk,nkd,nkr->kdr", scale, self.residual, self.theta)
                           + np.einsum("nk,nkd,nkr->kdr", scale, self.diff, res_coords))
            if self.excess is not None:
                active = self.excess > 0
                ratio = np.where(active, self.excess / np.where(active, self.offset, 1.0), 0.0)
                proj_coords = np.einsum("nkd,kdr->nkr", self.proj, B)
                grad_diff = grad_diff + ratio[..., None] * np.einsum("nkr,kdr->nkd", proj_coords, B)
                weighted = scale * ratio
                grad_bases = grad_bases + (np.einsum("nk,nkd,nkr->kdr", weighted, self.proj, self.theta)
                                           + np.einsum("nk,nkd,nkr->kdr", weighted, self.diff, proj_coords))
            grad_diff = scale[..., None] * grad_diff

        grad_x = grad_diff.sum(axis=1)
        grad_translations = -grad_diff.sum(axis=0)
        return grad_x, grad_translations, grad_bases
