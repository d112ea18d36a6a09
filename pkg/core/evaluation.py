"""
Clean accuracy, an L2 projected-gradient attack, robustness curves and
prior divergences.
"""
import logging
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial.distance import jensenshannon

from core.certification import certified_bounds
from core.errors import ConfigurationError, InputError
from core.model import INFERENCE_CHUNK, Model, ReasoningHead, backward, forward, model_scores
from schemas.request import AttackConfig
from schemas.response import AttackReport, CurvePoint, EvaluationReport, RobustnessCurve

logger = logging.getLogger(__name__)

# Gradient norms below this count as a flat objective
MIN_GRADIENT_NORM = 1e-12


def _dataset(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if X.shape[0] == 0:
        raise InputError("empty dataset")
    if X.shape[0] != y.shape[0]:
        raise InputError(f"{X.shape[0]} points but {y.shape[0]} labels")
    return X, y


def evaluate_accuracy(model: Model, X, y) -> float:
    X, y = _dataset(X, y)
    return float(np.mean(np.argmax(model_scores(model, X), axis=1) == y))


def evaluate_model(model: Model, X, y) -> EvaluationReport:
    X, y = _dataset(X, y)
    correct = np.argmax(model_scores(model, X), axis=1) == y
    per_class: List[Optional[float]] = []
    for c in range(model.C):
        members = y == c
        per_class.append(float(np.mean(correct[members])) if np.any(members) else None)
    return EvaluationReport(n_samples=int(X.shape[0]), accuracy=float(np.mean(correct)),
                            per_class_accuracy=per_class)


def l2_project(delta: np.ndarray, radius: float) -> np.ndarray:
    """Project each row of delta onto the L2 ball of the given radius."""
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.where(norms > radius, radius / np.where(norms > 0, norms, 1.0), 1.0)
    return delta * scale


def _misclassified(model: Model, X, y) -> np.ndarray:
    return np.argmax(forward(model, X).scores, axis=1) != y


def _attack_gradient(model: Model, X, y) -> np.ndarray:
    """Gradient w.r.t. the inputs of (best other score - true score)."""
    fp = forward(model, X)
    rows = np.arange(X.shape[0])
    others = np.array(fp.scores)
    others[rows, y] = -np.inf
    contrast = np.argmax(others, axis=1)
    grad_scores = np.zeros_like(fp.scores)
    grad_scores[rows, contrast] = 1.0
    grad_scores[rows, y] -= 1.0
    return backward(model, fp, grad_scores)["inputs"]


def _random_start(rng: np.random.Generator, n: int, epsilon: float) -> np.ndarray:
    """Uniform sample from the L2 ball of radius epsilon."""
    direction = rng.standard_normal(n)
    norm = np.linalg.norm(direction)
    if norm == 0:
        return np.zeros(n)
    return direction / norm * epsilon * rng.random() ** (1.0 / n)


def pgd_l2_batch(model: Model, X, y, cfg: AttackConfig, indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Run the attack on every row; returns a boolean "broken" flag per sample.

    Each sample draws its random starts from a generator seeded with
    (cfg.seed, index), so results do not depend on batching.
    """
    X, y = _dataset(X, y)
    indices = np.arange(X.shape[0]) if indices is None else np.asarray(indices)
    broken, _ = _pgd(model, X, y, cfg, indices)
    return broken


def _pgd(model: Model, X, y, cfg: AttackConfig, indices):
    N, n = X.shape
    if np.any(X < 0) or np.any(X > 1):
        raise InputError("attack inputs must lie in [0,1]^n")
    adversarial = X.copy()
    broken = _misclassified(model, X, y)
    if cfg.epsilon == 0:
        return broken, adversarial
    step_size = cfg.effective_step_size
    rngs = [np.random.Generator(np.random.MT19937(np.random.SeedSequence([cfg.seed, int(i)]))) for i in indices]

    for _ in range(cfg.restarts):
        active = np.flatnonzero(~broken)
        if active.size == 0:
            break
        starts = np.stack([_random_start(rngs[i], n, cfg.epsilon) for i in active])
        current = np.clip(X[active] + starts, 0.0, 1.0)
        for _ in range(cfg.steps):
            hit = _misclassified(model, current, y[active])
            if np.any(hit):
                broken[active[hit]] = True
                adversarial[active[hit]] = current[hit]
                keep = ~hit
                active, current = active[keep], current[keep]
                if active.size == 0:
                    break
            grad = _attack_gradient(model, current, y[active])
            norms = np.linalg.norm(grad, axis=1, keepdims=True)
            moving = norms[:, 0] > MIN_GRADIENT_NORM
            current[moving] += step_size * grad[moving] / norms[moving]
            current = np.clip(X[active] + l2_project(current - X[active], cfg.epsilon), 0.0, 1.0)
        if active.size:
            hit = _misclassified(model, current, y[active])
            broken[active[hit]] = True
            adversarial[active[hit]] = current[hit]
    return broken, adversarial


def pgd_l2(model: Model, x, y: int, cfg: AttackConfig, index: int = 0) -> Optional[np.ndarray]:
    """Adversarial point within the L2 budget that changes the prediction, or None."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    broken, adversarial = _pgd(model, X, np.array([y]), cfg, [index])
    return adversarial[0] if broken[0] else None


def attack_flags(model: Model, X, y, cfg: AttackConfig) -> np.ndarray:
    """Broken flag per sample, computed chunk by chunk."""
    X, y = _dataset(X, y)
    flags = [
        pgd_l2_batch(model, X[s:s + INFERENCE_CHUNK], y[s:s + INFERENCE_CHUNK], cfg,
                     np.arange(s, min(s + INFERENCE_CHUNK, X.shape[0])))
        for s in range(0, X.shape[0], INFERENCE_CHUNK)
    ]
    return np.concatenate(flags)


def empirical_robust_accuracy(model: Model, X, y, cfg: AttackConfig) -> float:
    """Fraction of samples classified correctly that also survive the attack."""
    return float(np.mean(~attack_flags(model, X, y, cfg)))


def attack_dataset(model: Model, X, y, cfg: AttackConfig) -> AttackReport:
    X, y = _dataset(X, y)
    broken = attack_flags(model, X, y, cfg)
    report = AttackReport(
        epsilon=cfg.epsilon, steps=cfg.steps, step_size=cfg.effective_step_size, restarts=cfg.restarts,
        seed=cfg.seed, n_samples=int(X.shape[0]),
        clean_accuracy=evaluate_accuracy(model, X, y),
        robust_accuracy=float(np.mean(~broken)),
    )
    logger.info(f"PGD-L2 eps={cfg.epsilon:g}: robust accuracy {report.robust_accuracy:.4f}")
    return report


def robustness_curve(model: Model, X, y, epsilons: Sequence[float], steps: int, restarts: int,
                     seed: int = 0) -> RobustnessCurve:
    """
    Empirical and certified accuracy per budget.

    A sample broken at one budget counts as broken at every larger one.
    """
    X, y = _dataset(X, y)
    epsilons = [float(e) for e in epsilons]
    if epsilons != sorted(epsilons):
        raise InputError("epsilon grid must be sorted ascending")
    correct = np.argmax(model_scores(model, X), axis=1) == y
    try:
        bounds = certified_bounds(model, X, y)
    except ConfigurationError:
        bounds = None

    broken = ~correct
    points = []
    for eps in epsilons:
        cfg = AttackConfig(epsilon=eps, steps=steps, restarts=restarts, seed=seed)
        broken = broken | attack_flags(model, X, y, cfg)
        point = CurvePoint(epsilon=eps, empirical=float(np.mean(~broken)))
        if bounds is not None:
            certified = correct & (bounds >= eps)
            point.certified = float(np.mean(certified))
            point.violations = int(np.sum(certified & broken))
            if point.violations:
                logger.warning(f"eps={eps:g}: {point.violations} certified samples broken by the attack")
        points.append(point)
    return RobustnessCurve(points=points)


def jensen_shannon(p, q) -> float:
    """Jensen-Shannon divergence with natural logarithm."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise InputError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return float(jensenshannon(p, q) ** 2)


def class_priors(head: ReasoningHead) -> np.ndarray:
    """Per-class component priors b_c (positive plus negative reasoning), averaged over concepts."""
    positive, negative = head.decode()
    return (positive + negative).mean(axis=1)


def prior_divergence(head: ReasoningHead, c1: int, c2: int) -> float:
    if not isinstance(head, ReasoningHead):
        raise ConfigurationError("prior divergence needs a reasoning head")
    for c in (c1, c2):
        if not 0 <= c < head.n_classes:
            raise InputError(f"class {c} out of range")
    if c1 == c2:
        return 0.0
    priors = class_priors(head)
    return jensen_shannon(priors[c1], priors[c2])
