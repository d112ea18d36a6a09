"""
Components, detection probabilities and the forward passes of every head.

A :class:`Model` bundles a :class:`ComponentSet` with one of the heads below.
All forward functions are pure; training mutates parameter arrays in place
under exclusive ownership (see ``core.training``).
"""
import copy
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy.spatial.distance import pdist

from core.errors import InputError, NumericalError, PreconditionError
from core.geometry import (
    ORTHONORMAL_TOLERANCE,
    AffineSubspace,
    Component,
    DistanceComputation,
    DistanceKind,
    orthonormality_error,
)
from core.numerics import inverse_softplus, softmax, softmax_backward, softplus, softplus_grad

logger = logging.getLogger(__name__)

PROBABILITY_TOLERANCE = 1e-12
# Batch size for inference over whole datasets; bounds the N x K x n distance tensors
INFERENCE_CHUNK = 256


class HeadKind(str, Enum):
    CBC = "cbc"
    ORIGINAL_CBC = "original_cbc"
    RBF = "rbf"
    RBF_NORM = "rbf_norm"
    GLVQ = "glvq"

    @property
    def is_reasoning(self) -> bool:
        """Heads that decode a ReasoningHead (and therefore admit certificates)."""
        return self in (HeadKind.CBC, HeadKind.RBF_NORM)


class TemperatureMode(str, Enum):
    SHARED = "shared"
    PER_COMPONENT = "per_component"


@dataclass
class ComponentSet:
    """K components (points, or affine subspaces when ``bases`` is set) and their temperatures."""
    kind: DistanceKind
    translations: np.ndarray                  # K x n
    raw_temperatures: np.ndarray              # K, or 1 when shared; sigma = softplus(raw)
    bases: Optional[np.ndarray] = None        # K x n x r
    constraint_radius: Optional[float] = None
    clip: bool = True

    @classmethod
    def from_temperatures(cls, kind, translations, temperatures, bases=None,
                          constraint_radius=None, clip=True) -> "ComponentSet":
        temperatures = np.atleast_1d(np.asarray(temperatures, dtype=float))
        if np.any(temperatures <= 0):
            raise InputError("temperatures must be positive")
        return cls(
            kind=DistanceKind(kind),
            translations=np.atleast_2d(np.asarray(translations, dtype=float)),
            raw_temperatures=inverse_softplus(temperatures),
            bases=None if bases is None else np.asarray(bases, dtype=float),
            constraint_radius=constraint_radius,
            clip=clip,
        )

    @property
    def K(self) -> int:
        return self.translations.shape[0]

    @property
    def n(self) -> int:
        return self.translations.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.bases is None else self.bases.shape[2]

    @property
    def shared(self) -> bool:
        return self.raw_temperatures.shape[0] == 1

    @property
    def temperatures(self) -> np.ndarray:
        """Per-component sigma (a shared temperature is broadcast to K entries)."""
        sigma = softplus(self.raw_temperatures)
        return np.broadcast_to(sigma, (self.K,)).copy()

    @property
    def sigma_min(self) -> float:
        return float(np.min(self.temperatures))

    def components(self) -> List[Component]:
        if self.bases is None:
            return [w.copy() for w in self.translations]
        return [AffineSubspace(w, W) for w, W in zip(self.translations, self.bases)]

    def distances(self, X) -> DistanceComputation:
        return DistanceComputation(X, self.translations, self.bases, self.kind, self.constraint_radius)

    def validate(self):
        if self.translations.ndim != 2 or self.K < 1:
            raise PreconditionError(f"expected K x n with K >= 1, got {self.translations.shape}", "components")
        if not np.all(np.isfinite(self.translations)):
            raise PreconditionError("non-finite entries", "components")
        if self.clip:
            if np.any(self.translations < 0) or np.any(self.translations > 1):
                raise PreconditionError("clipped components must lie in [0,1]^n", "components")
        if self.raw_temperatures.ndim != 1 or self.raw_temperatures.shape[0] not in (1, self.K):
            raise PreconditionError(f"expected 1 or {self.K} temperatures", "temperatures")
        sigma = self.temperatures
        if not np.all(np.isfinite(sigma)) or np.any(sigma <= 0):
            raise PreconditionError("temperatures must be finite and positive", "temperatures")
        if self.kind.is_tangent:
            if self.bases is None:
                raise PreconditionError(f"{self.kind.value} components need bases", "bases")
            if self.bases.shape[:2] != (self.K, self.n) or self.r >= self.n:
                raise PreconditionError(f"expected K x n x r bases with r < n, got {self.bases.shape}", "bases")
            drift = orthonormality_error(self.bases)
            if drift > ORTHONORMAL_TOLERANCE:
                raise PreconditionError(f"basis not orthonormal (||W^T W - I||_F = {drift:.3e})", "bases")
        elif self.bases is not None:
            raise PreconditionError(f"{self.kind.value} components must not carry bases", "bases")
        if self.kind is DistanceKind.CONSTRAINED_TANGENT and not (self.constraint_radius or 0) > 0:
            raise PreconditionError("constrained tangent distance needs a positive radius", "constraint_radius")


@dataclass
class ReasoningHead:
    """Raw reasoning logits v (C x M x 2K); first K entries positive, last K negative."""
    raw: np.ndarray
    negative_masked: bool = False

    @property
    def n_classes(self) -> int:
        return self.raw.shape[0]

    @property
    def n_concepts(self) -> int:
        return self.raw.shape[1]

    @property
    def K(self) -> int:
        return self.raw.shape[2] // 2

    def probabilities(self) -> np.ndarray:
        """Decoded 2K probability vectors for every (class, concept)."""
        logits = np.array(self.raw, dtype=float)
        if self.negative_masked:
            logits[..., self.K:] = -np.inf
        return softmax(logits, axis=-1)

    def decode(self) -> Tuple[np.ndarray, np.ndarray]:
        probs = self.probabilities()
        return probs[..., :self.K], probs[..., self.K:]


@dataclass
class OriginalReasoningHead:
    """Raw logits C x K x 3 for (P(R,I|k,c), P(not R,I|k,c), P(not I|k,c)); uniform prior."""
    raw: np.ndarray

    @property
    def n_classes(self) -> int:
        return self.raw.shape[0]

    def probabilities(self) -> np.ndarray:
        return softmax(self.raw, axis=-1)


@dataclass
class RBFHead:
    weights: np.ndarray                       # C x K
    bias: np.ndarray                          # C

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]


@dataclass
class GLVQHead:
    labels: np.ndarray                        # K class indices
    n_classes: int


Head = Union[ReasoningHead, OriginalReasoningHead, RBFHead, GLVQHead]

_HEAD_TYPES = {
    HeadKind.CBC: ReasoningHead,
    HeadKind.RBF_NORM: ReasoningHead,
    HeadKind.ORIGINAL_CBC: OriginalReasoningHead,
    HeadKind.RBF: RBFHead,
    HeadKind.GLVQ: GLVQHead,
}

# Trainable tensors by head; component tensors are added in Model.parameters()
_HEAD_PARAMETERS = {
    HeadKind.CBC: {"reasoning": "raw"},
    HeadKind.RBF_NORM: {"reasoning": "raw"},
    HeadKind.ORIGINAL_CBC: {"original_reasoning": "raw"},
    HeadKind.RBF: {"weights": "weights", "bias": "bias"},
    HeadKind.GLVQ: {},
}


@dataclass
class Model:
    head_kind: HeadKind
    components: ComponentSet
    head: Head
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.components.n

    @property
    def K(self) -> int:
        return self.components.K

    @property
    def C(self) -> int:
        return self.head.n_classes

    @property
    def M(self) -> int:
        if isinstance(self.head, ReasoningHead):
            return self.head.n_concepts
        if isinstance(self.head, GLVQHead):
            return self.K // max(self.C, 1)
        return 1

    @property
    def r(self) -> int:
        return self.components.r

    @property
    def kind(self) -> DistanceKind:
        return self.components.kind

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable tensors by name; the arrays are the live model storage."""
        params = {"translations": self.components.translations}
        if self.components.bases is not None:
            params["bases"] = self.components.bases
        if self.head_kind is not HeadKind.GLVQ:
            params["raw_temperatures"] = self.components.raw_temperatures
        for name, attr in _HEAD_PARAMETERS[self.head_kind].items():
            params[name] = getattr(self.head, attr)
        return params

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def validate(self):
        """Check every model invariant, raising PreconditionError naming the field."""
        self.head_kind = HeadKind(self.head_kind)
        expected = _HEAD_TYPES[self.head_kind]
        if not isinstance(self.head, expected):
            raise PreconditionError(f"{self.head_kind.value} needs a {expected.__name__}", "head")
        self.components.validate()
        K = self.K
        if isinstance(self.head, ReasoningHead):
            raw = self.head.raw
            if raw.ndim != 3 or raw.shape[2] != 2 * K or raw.shape[1] < 1:
                raise PreconditionError(f"expected C x M x {2 * K} reasoning, got {raw.shape}", "head.raw")
            if self.head_kind is HeadKind.RBF_NORM and not self.head.negative_masked:
                raise PreconditionError("rbf_norm requires negative_masked reasoning", "head.negative_masked")
        elif isinstance(self.head, OriginalReasoningHead):
            if self.head.raw.ndim != 3 or self.head.raw.shape[1:] != (K, 3):
                raise PreconditionError(f"expected C x {K} x 3 reasoning, got {self.head.raw.shape}", "head.raw")
        elif isinstance(self.head, RBFHead):
            if self.head.weights.shape[1:] != (K,) or self.head.bias.shape != (self.head.weights.shape[0],):
                raise PreconditionError("weights must be C x K and bias C", "head.weights")
        else:
            labels = np.asarray(self.head.labels)
            if labels.shape != (K,):
                raise PreconditionError(f"expected {K} prototype labels", "head.labels")
            if labels.min() < 0 or labels.max() >= self.head.n_classes:
                raise PreconditionError("prototype label out of range", "head.labels")
            missing = sorted(set(range(self.head.n_classes)) - set(labels.tolist()))
            if missing:
                raise PreconditionError(f"classes without prototypes: {missing}", "head.labels")
        for name, tensor in self.parameters().items():
            if not np.all(np.isfinite(tensor)):
                raise PreconditionError("non-finite parameter values", name)


# Single-sample operations


def detect(x, cs: ComponentSet) -> np.ndarray:
    """Detection probabilities exp(-dist_k(x) / sigma_k) for one input."""
    return detection_probabilities(np.atleast_2d(x), cs)[0]


def detection_probabilities(X, cs: ComponentSet) -> np.ndarray:
    distances = cs.distances(X)
    return np.exp(-distances.kernel / cs.temperatures)


def init_temperatures(data, cs: ComponentSet, p0: float, max_points: Optional[int] = None) -> np.ndarray:
    """
    sigma = -(mean + std) / ln(p0) over pairwise data distances.

    Distances are Euclidean between data points (squared for squared kinds);
    returns one value per stored temperature, all equal.
    """
    if not 0.0 < p0 < 1.0:
        raise InputError(f"p0 must lie in (0, 1), got {p0}")
    data = np.atleast_2d(np.asarray(data, dtype=float))
    if data.shape[0] < 2:
        raise InputError("need at least two data points to initialise temperatures")
    if max_points is not None and data.shape[0] > max_points:
        idx = np.linspace(0, data.shape[0] - 1, max_points).astype(int)
        data = data[idx]
    pairwise = pdist(data, "sqeuclidean" if cs.kind.is_squared else "euclidean")
    spread = float(np.mean(pairwise) + np.std(pairwise))
    sigma = -spread / np.log(p0)
    if not sigma > 0:
        raise InputError("degenerate data: pairwise distances are all zero")
    return np.full(cs.raw_temperatures.shape, sigma)


def decode_reasoning(head: ReasoningHead, c: int, i: int) -> Tuple[np.ndarray, np.ndarray]:
    if not (0 <= c < head.n_classes and 0 <= i < head.n_concepts):
        raise IndexError(f"class {c} / concept {i} out of range")
    positive, negative = head.decode()
    return positive[c, i], negative[c, i]


def _check_detections(d) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    if np.any(d < 0) or np.any(d > 1) or not np.all(np.isfinite(d)):
        raise InputError("detection probabilities must lie in [0, 1]")
    return d


def cbc_concept_probabilities(d, positive, negative) -> np.ndarray:
    """p_{c,i} = positive . d + negative . (1 - d); d is N x K, result N x C x M."""
    d = np.atleast_2d(_check_detections(d))
    positive = np.asarray(positive, dtype=float)
    negative = np.asarray(negative, dtype=float)
    return np.einsum("nk,cmk->ncm", d, positive - negative) + negative.sum(axis=-1)


def cbc_forward(d, head: ReasoningHead) -> np.ndarray:
    positive, negative = head.decode()
    return cbc_concept_probabilities(d, positive, negative).max(axis=-1)[0]


def original_cbc_probabilities(d, triples) -> np.ndarray:
    """Original CBC output for d (N x K) given decoded triples (C x K x 3)."""
    d = np.atleast_2d(_check_detections(d))
    triples = np.asarray(triples, dtype=float)
    agree, disagree = triples[..., 0], triples[..., 1]
    normalizer = (agree + disagree).sum(axis=-1)
    if np.any(normalizer <= PROBABILITY_TOLERANCE):
        raise NumericalError("all-indefinite reasoning: original CBC normaliser is zero")
    numerator = d @ (agree - disagree).T + disagree.sum(axis=-1)
    return numerator / normalizer


def original_cbc_forward(d, head: OriginalReasoningHead) -> np.ndarray:
    return original_cbc_probabilities(d, head.probabilities())[0]


def rbf_forward(d, weights, bias) -> np.ndarray:
    d = np.asarray(d, dtype=float)
    weights = np.asarray(weights, dtype=float)
    bias = np.asarray(bias, dtype=float)
    if weights.shape[-1] != d.shape[-1] or bias.shape != weights.shape[:1]:
        raise InputError(f"shape mismatch: d {d.shape}, weights {weights.shape}, bias {bias.shape}")
    return d @ weights.T + bias


def class_best_distances(kernel: np.ndarray, labels: np.ndarray, n_classes: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class minimum distance (N x C) and the winning prototype index per class."""
    kernel = np.atleast_2d(kernel)
    best = np.full((kernel.shape[0], n_classes), np.inf)
    winner = np.zeros((kernel.shape[0], n_classes), dtype=int)
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        local = np.argmin(kernel[:, members], axis=1)
        winner[:, c] = members[local]
        best[:, c] = kernel[np.arange(kernel.shape[0]), winner[:, c]]
    return best, winner


def glvq_forward(x, cs: ComponentSet, labels) -> Tuple[int, np.ndarray]:
    labels = np.asarray(labels, dtype=int)
    kernel = cs.distances(np.atleast_2d(x)).kernel
    best, _ = class_best_distances(kernel, labels, int(labels.max()) + 1)
    return int(np.argmin(best[0])), best[0]


# Batched forward pass


@dataclass
class ForwardPass:
    """Batched forward state; everything training needs to run backward."""
    distances: DistanceComputation
    detection: Optional[np.ndarray]           # N x K, None for GLVQ
    scores: np.ndarray                        # N x C
    positive: Optional[np.ndarray] = None     # C x M x K decoded reasoning
    negative: Optional[np.ndarray] = None
    concept_probs: Optional[np.ndarray] = None
    concept_choice: Optional[np.ndarray] = None
    triples: Optional[np.ndarray] = None
    normalizer: Optional[np.ndarray] = None
    winners: Optional[np.ndarray] = None      # N x C prototype index per class (GLVQ)


def forward(model: Model, X) -> ForwardPass:
    cs = model.components
    distances = cs.distances(X)
    if model.head_kind is HeadKind.GLVQ:
        best, winners = class_best_distances(distances.kernel, np.asarray(model.head.labels), model.C)
        return ForwardPass(distances=distances, detection=None, scores=-best, winners=winners)

    detection = np.exp(-distances.kernel / cs.temperatures)
    head = model.head
    if isinstance(head, ReasoningHead):
        positive, negative = head.decode()
        concept_probs = cbc_concept_probabilities(detection, positive, negative)
        choice = np.argmax(concept_probs, axis=-1)
        scores = np.take_along_axis(concept_probs, choice[..., None], axis=-1)[..., 0]
        return ForwardPass(distances=distances, detection=detection, scores=scores,
                           positive=positive, negative=negative,
                           concept_probs=concept_probs, concept_choice=choice)
    if isinstance(head, OriginalReasoningHead):
        triples = head.probabilities()
        scores = original_cbc_probabilities(detection, triples)
        normalizer = (triples[..., 0] + triples[..., 1]).sum(axis=-1)
        return ForwardPass(distances=distances, detection=detection, scores=scores,
                           triples=triples, normalizer=normalizer)
    return ForwardPass(distances=distances, detection=detection,
                       scores=rbf_forward(detection, head.weights, head.bias))


def model_scores(model: Model, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] <= INFERENCE_CHUNK:
        return forward(model, X).scores
    return np.concatenate([
        forward(model, X[start:start + INFERENCE_CHUNK]).scores
        for start in range(0, X.shape[0], INFERENCE_CHUNK)
    ])


def predict(model: Model, X) -> np.ndarray:
    """Argmax class per input; ties resolve to the lowest class index."""
    return np.argmax(model_scores(model, X), axis=1)


def min_component_distance(model: Model) -> float:
    """Smallest pairwise distance between component translations (collapse diagnostic)."""
    if model.K < 2:
        return float("inf")
    return float(np.min(pdist(model.components.translations)))


def backward(model: Model, fp: ForwardPass, grad_scores: Optional[np.ndarray] = None,
             extra: Optional[Dict[str, np.ndarray]] = None) -> Dict[str, np.ndarray]:
    """
    Pull gradients back through the head, the detections and the distances.

    ``grad_scores`` is N x C. ``extra`` may carry additional upstream gradients
    that bypass the scores: ``detection`` (N x K), ``dist`` (N x K, non-squared
    distance), ``sigma`` (K), ``positive`` / ``negative`` (C x M x K decoded
    reasoning). Returns gradients for every entry of ``model.parameters()``
    plus ``inputs`` (N x n).
    """
    extra = extra or {}
    N, K = fp.distances.dist.shape
    if grad_scores is None:
        grad_scores = np.zeros_like(fp.scores)
    grads: Dict[str, np.ndarray] = {}
    grad_kernel = np.zeros((N, K))
    cs = model.components

    if model.head_kind is HeadKind.GLVQ:
        rows = np.repeat(np.arange(N), model.C)
        np.add.at(grad_kernel, (rows, fp.winners.ravel()), -grad_scores.ravel())
    else:
        d = fp.detection
        grad_d = np.array(extra.get("detection", np.zeros((N, K))), dtype=float)
        head = model.head
        if isinstance(head, ReasoningHead):
            grad_concepts = np.zeros_like(fp.concept_probs)
            np.put_along_axis(grad_concepts, fp.concept_choice[..., None], grad_scores[..., None], axis=-1)
            grad_d += np.einsum("ncm,cmk->nk", grad_concepts, fp.positive - fp.negative)
            grad_pos = np.einsum("ncm,nk->cmk", grad_concepts, d) + extra.get("positive", 0.0)
            grad_neg = np.einsum("ncm,nk->cmk", grad_concepts, 1.0 - d) + extra.get("negative", 0.0)
            probs = np.concatenate([fp.positive, fp.negative], axis=-1)
            grads["reasoning"] = softmax_backward(probs, np.concatenate([grad_pos, grad_neg], axis=-1))
        elif isinstance(head, OriginalReasoningHead):
            agree, disagree = fp.triples[..., 0], fp.triples[..., 1]
            grad_num = grad_scores / fp.normalizer
            grad_norm = -np.sum(grad_scores * fp.scores, axis=0) / fp.normalizer
            grad_d += grad_num @ (agree - disagree)
            grad_triples = np.zeros_like(fp.triples)
            grad_triples[..., 0] = grad_num.T @ d + grad_norm[:, None]
            grad_triples[..., 1] = grad_num.T @ (1.0 - d) + grad_norm[:, None]
            grads["original_reasoning"] = softmax_backward(fp.triples, grad_triples)
        else:
            grad_d += grad_scores @ head.weights
            grads["weights"] = grad_scores.T @ d
            grads["bias"] = grad_scores.sum(axis=0)

        sigma = cs.temperatures
        kernel = fp.distances.kernel
        grad_kernel = -grad_d * d / sigma
        grad_sigma = np.sum(grad_d * d * kernel, axis=0) / sigma ** 2
        grad_sigma = grad_sigma + extra.get("sigma", 0.0)
        grad_raw = grad_sigma * softplus_grad_of(cs.raw_temperatures, K)
        grads["raw_temperatures"] = grad_raw.sum(keepdims=True) if cs.shared else grad_raw

    grad_dist = grad_kernel * 2.0 * fp.distances.dist if cs.kind.is_squared else grad_kernel
    if "dist" in extra:
        grad_dist = grad_dist + extra["dist"]
    grad_x, grad_translations, grad_bases = fp.distances.backward(grad_dist)
    grads["translations"] = grad_translations
    if grad_bases is not None:
        grads["bases"] = grad_bases
    grads["inputs"] = grad_x
    return grads


def softplus_grad_of(raw: np.ndarray, K: int) -> np.ndarray:
    return np.broadcast_to(softplus_grad(raw), (K,))
