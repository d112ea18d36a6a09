"""
Training losses.

Scalar forms (``margin_loss``, ``glvq_loss`` ...) evaluate one sample. The
``*_batch`` forms return per-sample values together with the gradient of each
value w.r.t. the quantity the loss consumes (class scores, or the robustness
margin); ``core.training`` chains those into parameter gradients.
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.special import logsumexp

from core.certification import (
    GAP_TOLERANCE,
    RobustnessMargins,
    certify_sample,
    robustness_margins,
    squared_radius,
)
from core.errors import CertificationError, InputError, NumericalError

logger = logging.getLogger(__name__)

LLR_FACTOR = 1.0 / 6.0


def _best_other(values: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Largest entry per row excluding the true class, and its index (lowest on ties)."""
    masked = np.array(values, dtype=float)
    masked[np.arange(masked.shape[0]), y] = -np.inf
    index = np.argmax(masked, axis=1)
    return masked[np.arange(masked.shape[0]), index], index


def _labels(y, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if y.shape != (n_rows,):
        raise InputError(f"expected {n_rows} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


# Margin


def margin_loss(p, y: int, gamma: float) -> float:
    p = np.asarray(p, dtype=float)
    return float(margin_loss_batch(p[None, :], np.array([y]), gamma)[0][0])


def margin_loss_batch(scores, y, gamma: float):
    """max(best other - p_y + gamma, 0) per sample, with its gradient w.r.t. scores."""
    if not 0.0 <= gamma <= 1.0:
        raise InputError(f"margin gamma must lie in [0, 1], got {gamma}")
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    y = _labels(y, scores.shape[0], scores.shape[1])
    rows = np.arange(scores.shape[0])
    other, other_index = _best_other(scores, y)
    raw = other - scores[rows, y] + gamma
    values = np.maximum(raw, 0.0)
    grad = np.zeros_like(scores)
    active = raw > 0
    grad[rows[active], other_index[active]] += 1.0
    grad[rows[active], y[active]] -= 1.0
    return values, grad


# GLVQ


def glvq_loss(d_plus: float, d_minus: float) -> float:
    if d_plus < 0 or d_minus < 0:
        raise InputError("distances must be nonnegative")
    total = d_plus + d_minus
    if total <= 0:
        raise NumericalError("glvq loss undefined when both distances are 0")
    return float((d_plus - d_minus) / total)


def glvq_loss_batch(scores, y):
    """
    GLVQ relative distance difference from GLVQ scores (negated best distances).

    Returns per-sample values and the gradient w.r.t. the scores.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    y = _labels(y, scores.shape[0], scores.shape[1])
    rows = np.arange(scores.shape[0])
    d_plus = -scores[rows, y]
    neg_other, other_index = _best_other(scores, y)
    d_minus = -neg_other
    total = d_plus + d_minus
    if np.any(total <= 0):
        raise NumericalError("glvq loss undefined when both distances are 0")
    values = (d_plus - d_minus) / total
    grad = np.zeros_like(scores)
    # scores are negated distances
    grad[rows, y] = -2.0 * d_minus / total ** 2
    grad[rows, other_index] = 2.0 * d_plus / total ** 2
    return values, grad


# Cross-entropy


def cross_entropy(scores, y: int) -> float:
    scores = np.asarray(scores, dtype=float)
    return float(cross_entropy_batch(scores[None, :], np.array([y]))[0][0])


def cross_entropy_batch(scores, y):
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    if not np.all(np.isfinite(scores)):
        raise NumericalError("cross-entropy needs finite scores")
    y = _labels(y, scores.shape[0], scores.shape[1])
    rows = np.arange(scores.shape[0])
    log_norm = logsumexp(scores, axis=1)
    values = log_norm - scores[rows, y]
    grad = np.exp(scores - log_norm[:, None])
    grad[rows, y] -= 1.0
    return values, grad


# Robust losses


def robust_loss(model, x, y: int, gamma: float) -> float:
    """-min(delta, gamma) for one sample (negative delta when misclassified)."""
    if gamma <= 0:
        raise InputError(f"robust gamma must be positive, got {gamma}")
    if model.kind.is_squared:
        raise InputError("robust_loss needs a non-squared distance; use robust_loss_squared")
    return -min(certify_sample(model, x, y), gamma)


def robust_loss_batch(margins: RobustnessMargins, gamma: float):
    """Values and gradient w.r.t. delta."""
    if gamma <= 0:
        raise InputError(f"robust gamma must be positive, got {gamma}")
    values = -np.minimum(margins.delta, gamma)
    grad_delta = np.where(margins.delta < gamma, -1.0, 0.0)
    return values, grad_delta


@dataclass
class SquaredRobustGradient:
    delta: np.ndarray
    beta: np.ndarray


def robust_loss_squared(model, x, y: int, gamma: float, lam: float) -> float:
    margins = robustness_margins(model, np.atleast_2d(x), np.array([y]))
    values, _ = robust_loss_squared_batch(margins, gamma, lam)
    return float(values[0])


def robust_loss_squared_value(delta, beta, gap, gamma: float, lam: float, radius_scale: float = 1.0):
    """
    -min(root-form radius, gamma) when the probability gap is positive, else -lam * delta.

    Elementwise on precomputed quantities; delta already carries kappa.
    """
    delta, beta, gap = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (delta, beta, gap)))
    positive = gap > GAP_TOLERANCE
    broken = positive & (delta < 0)
    if np.any(broken):
        idx = np.unravel_index(np.argmax(broken), broken.shape)
        raise CertificationError(
            f"sample {idx}: positive probability gap {gap[idx]:.3e} with negative bound {delta[idx]:.3e}"
        )
    root = np.sqrt(np.maximum(beta ** 2 / 9.0 + np.where(positive, delta, 0.0), 0.0))
    radius = radius_scale * (root - beta / 3.0)
    values = np.where(positive, -np.minimum(radius, gamma), -lam * delta)
    return float(values) if values.ndim == 0 else values


def robust_loss_squared_batch(margins: RobustnessMargins, gamma: float, lam: float):
    """
    -min(root-form radius, gamma) when the probability gap is positive, else -lam * delta.

    Returns values and a SquaredRobustGradient (w.r.t. delta and beta).
    """
    if gamma <= 0 or lam <= 0:
        raise InputError("robust_squared needs positive gamma and lambda")
    rule = margins.rule
    if not rule.root_form:
        raise InputError("robust_squared needs a squared distance kind")
    values = robust_loss_squared_value(margins.delta, margins.beta, margins.gap, gamma, lam, rule.radius_scale)
    positive = margins.gap > GAP_TOLERANCE
    radius, root = squared_radius(np.where(positive, margins.delta, 0.0), margins.beta, rule)
    clipped = positive & (radius < gamma)

    grad_delta = np.where(positive, 0.0, -lam)
    grad_beta = np.zeros_like(margins.beta)
    safe_root = np.where(root > 0, root, 1.0)
    grad_delta = np.where(clipped, -rule.radius_scale / (2.0 * safe_root), grad_delta)
    grad_beta = np.where(
        clipped, -rule.radius_scale * (-1.0 / 3.0 + margins.beta / (9.0 * safe_root)), grad_beta
    )
    return values, SquaredRobustGradient(delta=grad_delta, beta=grad_beta)


# Log-likelihood ratio


def llr_loss(d, positive_true, positive_others, sigma_min: float) -> float:
    """
    (sigma_min / 6) * min over contrasts of ln(v_y . d / v_c . d).

    ``positive_true`` is the K-vector of positive reasoning of the true class,
    ``positive_others`` the (C-1) x K positive reasoning of the contrasts.
    """
    d = np.asarray(d, dtype=float)
    numerator = float(np.dot(np.asarray(positive_true, dtype=float), d))
    denominators = np.atleast_2d(np.asarray(positive_others, dtype=float)) @ d
    if numerator <= 0 or np.any(denominators <= 0):
        raise NumericalError("log-likelihood ratio with a zero class probability")
    return float(sigma_min * LLR_FACTOR * np.min(np.log(numerator) - np.log(denominators)))


def llr_batch(scores, y, sigma_min: float):
    """
    Log-likelihood ratio per sample from positive-only class probabilities.

    Returns (values, gradient w.r.t. scores, gradient w.r.t. sigma_min per sample).
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=float))
    y = _labels(y, scores.shape[0], scores.shape[1])
    if np.any(scores <= 0):
        raise NumericalError("log-likelihood ratio with a zero class probability")
    rows = np.arange(scores.shape[0])
    logs = np.log(scores)
    other, other_index = _best_other(logs, y)
    log_ratio = logs[rows, y] - other
    kappa = sigma_min * LLR_FACTOR
    grad = np.zeros_like(scores)
    grad[rows, y] = kappa / scores[rows, y]
    grad[rows, other_index] = -kappa / scores[rows, other_index]
    return kappa * log_ratio, grad, LLR_FACTOR * log_ratio


def clipped_llr_batch(scores, y, sigma_min: float, gamma: float):
    """Training form -min(llr, gamma); gradients as in ``llr_batch``."""
    if gamma <= 0:
        raise InputError(f"gamma must be positive, got {gamma}")
    values, grad_scores, grad_sigma = llr_batch(scores, y, sigma_min)
    active = (values < gamma).astype(float)
    return -np.minimum(values, gamma), -active[:, None] * grad_scores, -active * grad_sigma


__all__ = [
    "margin_loss", "margin_loss_batch", "glvq_loss", "glvq_loss_batch",
    "cross_entropy", "cross_entropy_batch", "robust_loss", "robust_loss_batch",
    "robust_loss_squared", "robust_loss_squared_batch", "robust_loss_squared_value",
    "llr_loss", "llr_batch", "clipped_llr_batch",
]
