"""
Model construction, analytic gradients, Adam updates and the training loop.

The loop owns the model exclusively: parameters are updated in place and the
constraints (component box, orthonormal bases) are restored after every step.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from config import settings
from core.certification import margins_backward, robustness_margins
from core.errors import ConfigurationError, InputError, NumericalError, TrainingError
from core.geometry import DistanceKind, orthonormalize_basis
from core.model import (
    ComponentSet,
    GLVQHead,
    HeadKind,
    Model,
    OriginalReasoningHead,
    RBFHead,
    ReasoningHead,
    backward,
    forward,
    init_temperatures,
    min_component_distance,
)
from core.numerics import ClampCounter, inverse_softplus
from core.objectives import (
    clipped_llr_batch,
    cross_entropy_batch,
    glvq_loss_batch,
    margin_loss_batch,
    robust_loss_batch,
    robust_loss_squared_batch,
)
from schemas.request import TrainConfig
from schemas.response import EpochRecord, TrainingHistory

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Seed streams derived from TrainConfig.seed
INIT_STREAM = 0
SHUFFLE_STREAM = 1

TEMPERATURE_COLLAPSE = 1e-3

# Denominator floor for relative errors in grad_check; gradients below it are compared absolutely
GRAD_CHECK_FLOOR = 1e-4

LOSS_COMPATIBILITY = {
    HeadKind.CBC: {"margin", "cross_entropy", "robust", "robust_squared", "log_likelihood_ratio"},
    HeadKind.RBF_NORM: {"margin", "cross_entropy", "robust", "robust_squared", "log_likelihood_ratio"},
    HeadKind.ORIGINAL_CBC: {"margin", "cross_entropy"},
    HeadKind.RBF: {"margin", "cross_entropy"},
    HeadKind.GLVQ: {"glvq"},
}


def generator(seed: int, stream: int) -> np.random.Generator:
    """MT19937 generator for one named stream of a run."""
    return np.random.Generator(np.random.MT19937(np.random.SeedSequence([seed, stream])))


def check_loss_compatibility(model: Model, loss):
    head_kind = HeadKind(model.head_kind)
    if loss.name not in LOSS_COMPATIBILITY[head_kind]:
        raise ConfigurationError(
            f"loss '{loss.name}' cannot train a {head_kind.value} head "
            f"(allowed: {sorted(LOSS_COMPATIBILITY[head_kind])})"
        )
    if loss.name == "robust" and model.kind.is_squared:
        raise ConfigurationError("robust loss needs a non-squared distance; use robust_squared")
    if loss.name == "robust_squared" and not model.kind.is_squared:
        raise ConfigurationError("robust_squared loss needs a squared distance kind")
    if loss.name == "log_likelihood_ratio" and not model.head.negative_masked:
        raise ConfigurationError("log_likelihood_ratio needs positive-only (negative_masked) reasoning")


def build_model(config: TrainConfig, n: int, n_classes: int, data=None) -> Model:
    """
    Allocate a model for ``config`` with every parameter uniform in [0, 1).

    ``data`` (N x n) is used for the initial temperature; without it every
    temperature starts at 1.
    """
    if n < 1 or n_classes < 2:
        raise InputError(f"need n >= 1 and at least two classes, got n={n}, C={n_classes}")
    head_kind = HeadKind(config.head_kind)
    kind = DistanceKind(config.distance_kind)
    rng = generator(config.seed, INIT_STREAM)
    M = config.concepts_per_class
    K = n_classes * M if head_kind is HeadKind.GLVQ else config.n_components

    translations = rng.random((K, n))
    bases = None
    if kind.is_tangent:
        r = config.subspace_dim
        if r >= n:
            raise ConfigurationError(f"subspace_dim {r} must be smaller than the input dimension {n}")
        raw_bases = rng.random((K, n, r))
        bases = np.stack([orthonormalize_basis(b) for b in raw_bases])

    n_temperatures = 1 if config.temperature_mode == "shared" else K
    cs = ComponentSet(
        kind=kind,
        translations=translations,
        raw_temperatures=inverse_softplus(np.ones(n_temperatures)),
        bases=bases,
        constraint_radius=config.constraint_radius,
        clip=config.clip_components,
    )
    if data is not None and head_kind is not HeadKind.GLVQ:
        sigma = init_temperatures(data, cs, config.p0, settings.temperature_sample_size)
        cs.raw_temperatures = inverse_softplus(sigma)
        logger.info(f"Initial temperature sigma = {sigma[0]:.6g} (p0 = {config.p0})")

    if head_kind in (HeadKind.CBC, HeadKind.RBF_NORM):
        head = ReasoningHead(
            raw=rng.random((n_classes, M, 2 * K)),
            negative_masked=config.negative_masked or head_kind is HeadKind.RBF_NORM,
        )
    elif head_kind is HeadKind.ORIGINAL_CBC:
        head = OriginalReasoningHead(raw=rng.random((n_classes, K, 3)))
    elif head_kind is HeadKind.RBF:
        head = RBFHead(weights=rng.random((n_classes, K)), bias=rng.random(n_classes))
    else:
        head = GLVQHead(labels=np.repeat(np.arange(n_classes), M), n_classes=n_classes)

    model = Model(head_kind=head_kind, components=cs, head=head,
                  metadata={"config": config.model_dump(mode="json")})
    model.validate()
    return model


@dataclass
class GradientBundle:
    """Gradients keyed like ``Model.parameters()``."""
    tensors: Dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        return self.tensors.items()

    def norms(self) -> Dict[str, float]:
        return {name: float(np.linalg.norm(g)) for name, g in self.tensors.items()}

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(g)) for g in self.tensors.values())


def _batch_losses(model: Model, X, y, loss, counter: Optional[ClampCounter] = None):
    """Per-sample losses and the parameter gradients of their sum."""
    fp = forward(model, X)
    name = loss.name
    if name in ("margin", "cross_entropy", "glvq"):
        if name == "margin":
            values, grad_scores = margin_loss_batch(fp.scores, y, loss.gamma)
        elif name == "cross_entropy":
            values, grad_scores = cross_entropy_batch(fp.scores, y)
        else:
            values, grad_scores = glvq_loss_batch(fp.scores, y)
        return values, backward(model, fp, grad_scores)

    if name == "log_likelihood_ratio":
        cs = model.components
        sigma = cs.temperatures
        values, grad_scores, grad_sigma_min = clipped_llr_batch(fp.scores, y, float(sigma.min()), loss.gamma)
        grad_sigma = np.zeros(model.K)
        grad_sigma[int(np.argmin(sigma))] = float(np.sum(grad_sigma_min))
        return values, backward(model, fp, grad_scores, {"sigma": grad_sigma})

    margins = robustness_margins(model, X, y, fp, counter)
    if name == "robust":
        values, grad_delta = robust_loss_batch(margins, loss.gamma)
        extra = margins_backward(model, fp, margins, grad_delta)
    else:
        values, grad = robust_loss_squared_batch(margins, loss.gamma, loss.lam)
        extra = margins_backward(model, fp, margins, grad.delta, grad.beta)
    return values, backward(model, fp, None, extra)


def compute_gradients(model: Model, X, y, loss, counter: Optional[ClampCounter] = None) -> Tuple[float, GradientBundle]:
    """Mean batch loss and its analytic gradient w.r.t. every trainable tensor."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if X.shape[0] == 0:
        raise InputError("empty batch")
    check_loss_compatibility(model, loss)
    values, grads = _batch_losses(model, X, y, loss, counter)
    scale = 1.0 / X.shape[0]
    tensors = {}
    for name, param in model.parameters().items():
        g = grads.get(name)
        tensors[name] = np.zeros_like(param) if g is None else np.asarray(g, dtype=float).reshape(param.shape) * scale
    return float(np.mean(values)), GradientBundle(tensors)


def loss_value(model: Model, X, y, loss) -> float:
    values, _ = _batch_losses(model, np.atleast_2d(X), np.atleast_1d(y), loss)
    return float(np.mean(values))


@dataclass
class AdamState:
    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, model: Model) -> "AdamState":
        params = model.parameters()
        return cls(
            first={name: np.zeros_like(p) for name, p in params.items()},
            second={name: np.zeros_like(p) for name, p in params.items()},
        )


def optimizer_step(model: Model, grads: GradientBundle, state: AdamState, config: TrainConfig):
    """One Adam update applied in place to every trainable tensor."""
    state.step += 1
    lr = config.learning_rate
    correction1 = 1.0 - ADAM_BETA1 ** state.step
    correction2 = 1.0 - ADAM_BETA2 ** state.step
    for name, param in model.parameters().items():
        g = grads[name]
        m = state.first[name]
        v = state.second[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * g * g
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + ADAM_EPS)
    return model, state


def apply_constraints(model: Model, context: str = "") -> Model:
    """Clip components into [0,1]^n and re-orthonormalise every basis (idempotent)."""
    cs = model.components
    if cs.clip:
        np.clip(cs.translations, 0.0, 1.0, out=cs.translations)
    if cs.bases is not None:
        for k in range(cs.K):
            try:
                cs.bases[k] = orthonormalize_basis(cs.bases[k])
            except NumericalError as e:
                raise TrainingError(f"basis {k} collapsed{' at ' + context if context else ''}: {e}") from e
    return model


def iterate_batches(n_samples: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(n_samples)
    for start in range(0, n_samples, batch_size):
        yield order[start:start + batch_size]


def fit(model: Model, X, y, config: TrainConfig) -> Tuple[Model, TrainingHistory]:
    """Train ``model`` in place for ``config.epochs`` epochs; returns the model and its history."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=int))
    if X.shape[0] == 0 or X.shape[0] != y.shape[0]:
        raise InputError(f"dataset has {X.shape[0]} points and {y.shape[0]} labels")
    if X.shape[1] != model.n:
        raise InputError(f"dataset dimension {X.shape[1]} does not match the model ({model.n})")
    if np.any(y < 0) or np.any(y >= model.C):
        raise InputError(f"labels must lie in [0, {model.C})")
    check_loss_compatibility(model, config.loss)

    rng = generator(config.seed, SHUFFLE_STREAM)
    state = AdamState.create(model)
    counter = ClampCounter()
    history = TrainingHistory(config=config.model_dump(mode="json"))
    initial_sigma = model.components.sigma_min

    logger.info(
        f"Training {HeadKind(model.head_kind).value} ({model.kind.value}) with {config.loss.name} loss: "
        f"N={X.shape[0]}, K={model.K}, epochs={config.epochs}, batch={config.batch_size}"
    )
    for epoch in range(1, config.epochs + 1):
        counter.reset()
        total_loss = 0.0
        n_correct = 0
        for step, batch in enumerate(iterate_batches(X.shape[0], config.batch_size, rng)):
            Xb, yb = X[batch], y[batch]
            mean_loss, grads = compute_gradients(model, Xb, yb, config.loss, counter)
            if not np.isfinite(mean_loss) or not grads.is_finite():
                logger.error(
                    f"Non-finite loss at epoch {epoch}, step {step}: loss={mean_loss}, "
                    f"clamps={counter.total}, gradient norms={grads.norms()}"
                )
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}")
            total_loss += mean_loss * len(batch)
            n_correct += int(np.sum(np.argmax(forward(model, Xb).scores, axis=1) == yb))
            optimizer_step(model, grads, state, config)
            apply_constraints(model, f"epoch {epoch}, step {step}")

        record = EpochRecord(
            epoch=epoch,
            loss=total_loss / X.shape[0],
            accuracy=n_correct / X.shape[0],
            clamp_events=counter.total,
        )
        if HeadKind(model.head_kind) is not HeadKind.GLVQ:
            sigma = model.components.temperatures
            record.sigma_min = float(sigma.min())
            record.sigma_max = float(sigma.max())
            if record.sigma_min < TEMPERATURE_COLLAPSE * initial_sigma:
                logger.warning(f"Epoch {epoch}: temperature collapsing (sigma_min = {record.sigma_min:.3e})")
        if counter.total:
            logger.warning(f"Epoch {epoch}: {counter.total} clamped log/sqrt arguments")
        history.epochs.append(record)
        logger.info(
            f"Epoch {epoch}/{config.epochs}: loss={record.loss:.6f} accuracy={record.accuracy:.4f}"
            + (f" sigma_min={record.sigma_min:.4g}" if record.sigma_min is not None else "")
        )

    history.min_component_distance = min_component_distance(model)
    if history.min_component_distance < 1e-6:
        logger.warning(f"Components collapsed: minimum pairwise distance {history.min_component_distance:.3e}")
    model.metadata.update({
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "final_loss": history.epochs[-1].loss,
        "final_accuracy": history.epochs[-1].accuracy,
    })
    return model, history


def grad_check(model: Model, X, y, loss, n_probes: int, step: float = 1e-5, seed: int = 0,
               kink_tolerance: float = 1e-2, max_resamples: int = 50) -> float:
    """
    Worst relative error between analytic and central-difference gradients.

    Probes are random (tensor, entry) coordinates; a probe whose one-sided
    slopes disagree (a max/min switch inside the stencil) is resampled.
    """
    rng = np.random.default_rng(seed)
    _, grads = compute_gradients(model, X, y, loss)
    params = model.parameters()
    names = sorted(params)
    sizes = np.array([params[name].size for name in names], dtype=float)
    worst = 0.0
    checked = 0
    attempts = 0
    base = loss_value(model, X, y, loss)
    while checked < n_probes and attempts < n_probes * max_resamples:
        attempts += 1
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        tensor = params[name]
        index = tuple(int(rng.integers(s)) for s in tensor.shape)
        original = tensor[index]
        tensor[index] = original + step
        upper = loss_value(model, X, y, loss)
        tensor[index] = original - step
        lower = loss_value(model, X, y, loss)
        tensor[index] = original

        forward_slope = (upper - base) / step
        backward_slope = (base - lower) / step
        if abs(forward_slope - backward_slope) > kink_tolerance * max(abs(forward_slope), abs(backward_slope), 1e-3):
            continue
        numeric = (upper - lower) / (2.0 * step)
        analytic = float(grads[name][index])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRAD_CHECK_FLOOR)
        if error > worst:
            logger.debug(f"{name}{list(index)}: analytic={analytic:.8g} numeric={numeric:.8g}")
        worst = max(worst, error)
        checked += 1
    if checked < n_probes:
        logger.warning(f"Only {checked} of {n_probes} probes were away from kinks")
    return worst
