"""
Closed-form robustness certificates.

For reasoning heads the worst case of an L2 perturbation of norm eps is that
every detection shrinks or grows by a factor exp(eps / kappa). The class
probability difference then becomes C/t + A*t + B with t = exp(eps / kappa);
its positive root is the certified ratio. GLVQ models are certified by their
hypothesis margin instead.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from core.errors import CertificationError, ConfigurationError, InputError
from core.geometry import DistanceComputation, DistanceKind
from core.model import (
    INFERENCE_CHUNK,
    ComponentSet,
    ForwardPass,
    HeadKind,
    Model,
    class_best_distances,
    forward,
    model_scores,
)
from core.numerics import CLAMP_FLOOR, ClampCounter
from schemas.response import CertificationReport, CertifiedPoint

logger = logging.getLogger(__name__)

GAP_TOLERANCE = 1e-10
LINEAR_TOLERANCE = 1e-12
DISCRIMINANT_TOLERANCE = 1e-12


@dataclass(frozen=True)
class KappaRule:
    """How sigma_min turns into a certified radius for one distance kind."""
    kind: DistanceKind
    factor: float
    root_form: bool = False
    radius_scale: float = 1.0

    def kappa(self, sigma_min: float) -> float:
        if sigma_min <= 0:
            raise InputError(f"sigma_min must be positive, got {sigma_min}")
        return self.factor * sigma_min


# Squared tangent: the squared rule on the tangent distance, final radius halved.
# Constrained tangent is certified with the tangent rule.
_KAPPA_RULES: Dict[DistanceKind, KappaRule] = {
    DistanceKind.EUCLIDEAN: KappaRule(DistanceKind.EUCLIDEAN, 1.0),
    DistanceKind.TANGENT: KappaRule(DistanceKind.TANGENT, 0.5),
    DistanceKind.CONSTRAINED_TANGENT: KappaRule(DistanceKind.CONSTRAINED_TANGENT, 0.5),
    DistanceKind.SQUARED_EUCLIDEAN: KappaRule(DistanceKind.SQUARED_EUCLIDEAN, 1.0 / 3.0, root_form=True),
    DistanceKind.SQUARED_TANGENT: KappaRule(
        DistanceKind.SQUARED_TANGENT, 1.0 / 3.0, root_form=True, radius_scale=0.5
    ),
}


def kappa_rule(kind) -> KappaRule:
    return _KAPPA_RULES[DistanceKind(kind)]


@dataclass(frozen=True)
class ContrastCoefficients:
    A: float
    B: float
    C: float

    @property
    def gap(self) -> float:
        """p_y - p_c at the unperturbed input."""
        return self.A + self.B + self.C

    @property
    def discriminant(self) -> float:
        return self.B ** 2 - 4.0 * self.A * self.C


def contrast_coefficients(d, head_y: Tuple[np.ndarray, np.ndarray],
                          head_c: Tuple[np.ndarray, np.ndarray]) -> ContrastCoefficients:
    """Coefficients of the worst-case probability difference between class y and contrast c."""
    d = np.asarray(d, dtype=float)
    pos_y, neg_y = (np.asarray(v, dtype=float) for v in head_y)
    pos_c, neg_c = (np.asarray(v, dtype=float) for v in head_c)
    return ContrastCoefficients(
        A=float(-np.dot(neg_y + pos_c, d)),
        B=float(neg_y.sum() - neg_c.sum()),
        C=float(np.dot(pos_y + neg_c, d)),
    )


def _root(A, B, C, sqrt_disc):
    """Positive root of A t^2 + B t + C = 0 (A < 0), in the cancellation-free form."""
    with np.errstate(divide="ignore", invalid="ignore"):
        low = 2.0 * C / (sqrt_disc - B)
        high = -(B + sqrt_disc) / (2.0 * A)
    return np.where(B <= 0, low, high)


def flip_ratio(A, B, C, t_linear, counter: Optional[ClampCounter] = None):
    """
    Certified detection scaling factor t, the positive root of A t^2 + B t + C = 0.

    Where |A| vanishes the equation degenerates and ``t_linear``, the summed
    reasoning prior of both classes applied to the detections, is used.
    Returns (t, square root of the discriminant, linear mask).
    """
    A, B, C = (np.asarray(v, dtype=float) for v in (A, B, C))
    disc = B ** 2 - 4.0 * A * C
    if np.any(disc < -DISCRIMINANT_TOLERANCE):
        idx = np.unravel_index(np.argmin(disc), disc.shape)
        raise CertificationError(
            f"negative discriminant {disc[idx]:.3e} at {idx}: A={A[idx]:.6g} B={B[idx]:.6g} C={C[idx]:.6g}"
        )
    if counter is not None:
        counter.sqrt_clamps += int(np.count_nonzero(disc < 0.0))
    sqrt_disc = np.sqrt(np.maximum(disc, 0.0))
    linear = np.abs(A) < LINEAR_TOLERANCE
    t = np.where(linear, t_linear, _root(A, B, C, sqrt_disc))
    t = np.where(np.isfinite(t), t, 0.0)
    return t, sqrt_disc, linear


def squared_radius(delta, beta, rule: KappaRule):
    """-beta/3 + sqrt(beta^2/9 + delta), scaled by the rule; returns (radius, root)."""
    delta = np.asarray(delta, dtype=float)
    beta = np.asarray(beta, dtype=float)
    root = np.sqrt(np.maximum(beta ** 2 / 9.0 + delta, 0.0))
    return rule.radius_scale * (root - beta / 3.0), root


@dataclass
class RobustnessMargins:
    """Batched certificates for a reasoning head, with the selected contrast per sample."""
    rule: KappaRule
    sigma_min: float
    sigma_argmin: int
    kappa: float
    labels: np.ndarray
    log_ratio: np.ndarray
    delta: np.ndarray
    gap: np.ndarray
    correct: np.ndarray
    beta: np.ndarray
    beta_index: np.ndarray
    contrast: np.ndarray
    concept_true: np.ndarray
    concept_contrast: np.ndarray
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    sqrt_disc: np.ndarray
    t: np.ndarray
    linear: np.ndarray
    clamped: np.ndarray

    @property
    def bound(self) -> np.ndarray:
        """
        Certified L2 radius per sample.

        Non-squared kinds return delta itself (negative when misclassified);
        squared kinds return NaN for misclassified samples.
        """
        if not self.rule.root_form:
            return self.delta
        radius, _ = squared_radius(np.maximum(self.delta, 0.0), self.beta, self.rule)
        return np.where(self.correct, radius, np.nan)


def _require_reasoning(model: Model):
    if not HeadKind(model.head_kind).is_reasoning:
        raise ConfigurationError(f"no closed-form certificate for {HeadKind(model.head_kind).value} heads")
    if model.C < 2:
        raise ConfigurationError("certificates need at least two classes")


def robustness_margins(model: Model, X, y, fp: Optional[ForwardPass] = None,
                       counter: Optional[ClampCounter] = None) -> RobustnessMargins:
    _require_reasoning(model)
    if fp is None:
        fp = forward(model, X)
    d = fp.detection
    N = d.shape[0]
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if y.shape != (N,) or np.any(y < 0) or np.any(y >= model.C):
        raise InputError("labels do not match the batch or the number of classes")
    rows = np.arange(N)
    pos, neg = fp.positive, fp.negative

    pos_d = np.einsum("cmk,nk->ncm", pos, d)
    neg_d = np.einsum("cmk,nk->ncm", neg, d)
    neg_sum = neg.sum(axis=-1)
    # axes: sample, contrast class, true concept i, contrast concept j
    A = -(neg_d[rows, y][:, None, :, None] + pos_d[:, :, None, :])
    B = neg_sum[y][:, None, :, None] - neg_sum[None, :, None, :]
    C = pos_d[rows, y][:, None, :, None] + neg_d[:, :, None, :]
    B = np.broadcast_to(B, A.shape)

    prior_d = pos_d + neg_d
    t_linear = prior_d[rows, y][:, None, :, None] + prior_d[:, :, None, :]
    t, sqrt_disc, linear = flip_ratio(A, B, C, t_linear, counter)
    log_t = np.log(np.maximum(t, CLAMP_FLOOR))
    log_t[rows, y] = np.inf

    j_best = np.argmin(log_t, axis=3)
    inner = np.take_along_axis(log_t, j_best[..., None], axis=3)[..., 0]
    i_best = np.argmax(inner, axis=2)
    outer = np.take_along_axis(inner, i_best[..., None], axis=2)[..., 0]
    contrast = np.argmin(outer, axis=1)
    concept_true = i_best[rows, contrast]
    concept_contrast = j_best[rows, contrast, concept_true]
    pick = (rows, contrast, concept_true, concept_contrast)

    selected_t = t[pick]
    clamped = selected_t < CLAMP_FLOOR
    if counter is not None and np.any(clamped):
        counter.log_clamps += int(np.count_nonzero(clamped))

    sigma = model.components.temperatures
    sigma_argmin = int(np.argmin(sigma))
    rule = kappa_rule(model.kind)
    kappa = rule.kappa(float(sigma[sigma_argmin]))
    log_ratio = outer[rows, contrast]

    scores = fp.scores
    others = np.array(scores, dtype=float)
    others[rows, y] = -np.inf
    gap = scores[rows, y] - others.max(axis=1)
    dist = fp.distances.dist
    beta_index = np.argmax(dist, axis=1)

    return RobustnessMargins(
        rule=rule,
        sigma_min=float(sigma[sigma_argmin]),
        sigma_argmin=sigma_argmin,
        kappa=kappa,
        labels=y,
        log_ratio=log_ratio,
        delta=kappa * log_ratio,
        gap=gap,
        correct=np.argmax(scores, axis=1) == y,
        beta=dist[rows, beta_index],
        beta_index=beta_index,
        contrast=contrast,
        concept_true=concept_true,
        concept_contrast=concept_contrast,
        A=A[pick],
        B=B[pick],
        C=C[pick],
        sqrt_disc=sqrt_disc[pick],
        t=selected_t,
        linear=linear[pick],
        clamped=clamped,
    )


def margins_backward(model: Model, fp: ForwardPass, margins: RobustnessMargins,
                     grad_delta: np.ndarray, grad_beta: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """
    Upstream gradients for ``core.model.backward`` from gradients w.r.t. delta (and beta).

    Subgradients follow the selected contrast and concepts only.
    """
    d = fp.detection
    N, K = d.shape
    rows = np.arange(N)
    y, c = margins.labels, margins.contrast
    i, j = margins.concept_true, margins.concept_contrast
    pos, neg = fp.positive, fp.negative
    pos_y, neg_y, pos_c, neg_c = pos[y, i], neg[y, i], pos[c, j], neg[c, j]

    grad_log = np.where(margins.clamped, 0.0, grad_delta * margins.kappa)
    usable = margins.sqrt_disc > 0
    safe_sqrt = np.where(usable, margins.sqrt_disc, 1.0)
    safe_t = np.where(margins.t > 0, margins.t, 1.0)
    general = ~margins.linear & usable
    g_A = np.where(general, grad_log * margins.t / safe_sqrt, 0.0)
    g_B = np.where(general, grad_log / safe_sqrt, 0.0)
    g_C = np.where(general, grad_log / (safe_t * safe_sqrt), 0.0)
    g_lin = np.where(margins.linear, grad_log / safe_t, 0.0)

    w_pos_y = g_C + g_lin
    w_neg_y = -g_A + g_lin
    w_pos_c = -g_A + g_lin
    w_neg_c = g_C + g_lin

    grad_detection = (w_pos_y[:, None] * pos_y + w_neg_y[:, None] * neg_y
                      + w_pos_c[:, None] * pos_c + w_neg_c[:, None] * neg_c)
    grad_pos = np.zeros_like(pos)
    grad_neg = np.zeros_like(neg)
    np.add.at(grad_pos, (y, i), w_pos_y[:, None] * d)
    np.add.at(grad_neg, (y, i), w_neg_y[:, None] * d + g_B[:, None])
    np.add.at(grad_pos, (c, j), w_pos_c[:, None] * d)
    np.add.at(grad_neg, (c, j), w_neg_c[:, None] * d - g_B[:, None])

    grad_sigma = np.zeros(model.K)
    grad_sigma[margins.sigma_argmin] = margins.rule.factor * float(np.sum(grad_delta * margins.log_ratio))

    extra = {"detection": grad_detection, "positive": grad_pos, "negative": grad_neg, "sigma": grad_sigma}
    if grad_beta is not None:
        grad_dist = np.zeros((N, K))
        grad_dist[rows, margins.beta_index] = grad_beta
        extra["dist"] = grad_dist
    return extra


def certify_sample(model: Model, x, y: int) -> float:
    """Certified log-ratio bound scaled by kappa; negative when x is misclassified."""
    margins = robustness_margins(model, np.atleast_2d(x), np.array([y]))
    return float(margins.delta[0])


def certify_sample_scaled(model: Model, x, y: int) -> Optional[float]:
    """Certified L2 radius under the model's distance kind; None when there is no certificate."""
    margins = robustness_margins(model, np.atleast_2d(x), np.array([y]))
    bound = float(margins.bound[0])
    return None if np.isnan(bound) else bound


def glvq_margins(X, y, cs: ComponentSet, labels) -> np.ndarray:
    """Batched hypothesis margin with the non-squared distance of the component kind."""
    labels = np.asarray(labels, dtype=int)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    n_classes = int(labels.max()) + 1
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    distances = DistanceComputation(X, cs.translations, cs.bases, cs.kind.unsquared, cs.constraint_radius)
    best, _ = class_best_distances(distances.dist, labels, n_classes)
    rows = np.arange(X.shape[0])
    d_plus = best[rows, y]
    best[rows, y] = np.inf
    d_minus = best.min(axis=1)
    return 0.5 * (d_minus - d_plus)


def certify_glvq(x, y: int, cs: ComponentSet, labels) -> float:
    return float(glvq_margins(np.atleast_2d(x), np.array([y]), cs, labels)[0])


def certified_bounds(model: Model, X, y) -> np.ndarray:
    """Per-sample certified radius using the rule appropriate for the model."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    chunks = []
    for start in range(0, X.shape[0], INFERENCE_CHUNK):
        part = slice(start, start + INFERENCE_CHUNK)
        if HeadKind(model.head_kind) is HeadKind.GLVQ:
            chunks.append(glvq_margins(X[part], y[part], model.components, model.head.labels))
        else:
            chunks.append(robustness_margins(model, X[part], y[part]).bound)
    return np.concatenate(chunks)


def certify_dataset(model: Model, X, y, epsilons: Sequence[float]) -> CertificationReport:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if X.shape[0] == 0:
        raise InputError("cannot certify an empty dataset")
    if any(eps < 0 for eps in epsilons):
        raise InputError("epsilon values must be nonnegative")

    head_kind = HeadKind(model.head_kind)
    predictions = np.argmax(model_scores(model, X), axis=1)
    correct = predictions == y
    bounds = certified_bounds(model, X, y)
    certified = [
        CertifiedPoint(
            epsilon=float(eps),
            accuracy=float(np.mean(correct & (bounds >= eps))),
        )
        for eps in epsilons
    ]
    if head_kind is HeadKind.GLVQ:
        kappa, sigma_min = None, None
    else:
        sigma_min = model.components.sigma_min
        kappa = kappa_rule(model.kind).kappa(sigma_min)
    logger.info(
        f"Certified {X.shape[0]} samples ({head_kind.value}, {model.kind.value}): "
        + ", ".join(f"eps={p.epsilon:g} -> {p.accuracy:.4f}" for p in certified)
    )
    return CertificationReport(
        head_kind=head_kind.value,
        distance_kind=model.kind.value,
        kappa=kappa,
        sigma_min=sigma_min,
        n_samples=int(X.shape[0]),
        clean_accuracy=float(np.mean(correct)),
        predictions=predictions.tolist(),
        correct=correct.tolist(),
        bounds=[None if np.isnan(b) else float(b) for b in bounds],
        certified=certified,
    )
