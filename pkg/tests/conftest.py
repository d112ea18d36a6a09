import numpy as np
import pytest

from core.geometry import DistanceKind, orthonormalize_basis
from core.model import (
    ComponentSet,
    GLVQHead,
    HeadKind,
    Model,
    OriginalReasoningHead,
    RBFHead,
    ReasoningHead,
)
from utils.datasets import make_blobs


def random_model(rng, head_kind="cbc", kind="euclidean", n=3, K=4, C=3, M=2, r=1,
                 shared=False, constraint_radius=None, sigma_range=(0.4, 1.2), clip=True):
    """Small model with random parameters and pairwise distinct temperatures."""
    head_kind = HeadKind(head_kind)
    kind = DistanceKind(kind)
    if head_kind is HeadKind.GLVQ:
        K = C * M
    translations = rng.random((K, n))
    bases = None
    if kind.is_tangent:
        bases = np.stack([orthonormalize_basis(rng.standard_normal((n, r))) for _ in range(K)])
    if kind is DistanceKind.CONSTRAINED_TANGENT and constraint_radius is None:
        constraint_radius = 0.05
    sigma = np.array([rng.uniform(*sigma_range)]) if shared else rng.uniform(*sigma_range, size=K)
    cs = ComponentSet.from_temperatures(kind, translations, sigma, bases=bases,
                                        constraint_radius=constraint_radius, clip=clip)
    if head_kind in (HeadKind.CBC, HeadKind.RBF_NORM):
        head = ReasoningHead(raw=rng.normal(size=(C, M, 2 * K)), negative_masked=head_kind is HeadKind.RBF_NORM)
    elif head_kind is HeadKind.ORIGINAL_CBC:
        head = OriginalReasoningHead(raw=rng.normal(size=(C, K, 3)))
    elif head_kind is HeadKind.RBF:
        head = RBFHead(weights=rng.normal(size=(C, K)), bias=rng.normal(size=C))
    else:
        head = GLVQHead(labels=np.repeat(np.arange(C), M), n_classes=C)
    model = Model(head_kind=head_kind, components=cs, head=head)
    model.validate()
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def blobs():
    return make_blobs(n_classes=3, per_class=40, spread=0.03, seed=7)


@pytest.fixture
def two_blobs():
    return make_blobs(n_classes=2, per_class=40, spread=0.03, seed=3)
