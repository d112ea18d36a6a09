from .errors import PrototypeError
from .geometry import AffineSubspace, DistanceKind
from .model import ComponentSet, HeadKind, Model, model_scores, predict
from .certification import certify_dataset, certify_sample, certify_sample_scaled, certify_glvq
from .training import build_model, compute_gradients, fit, grad_check
from .evaluation import evaluate_accuracy, pgd_l2, prior_divergence, robustness_curve

__all__ = [
    'PrototypeError', 'AffineSubspace', 'DistanceKind', 'ComponentSet', 'HeadKind', 'Model',
    'model_scores', 'predict', 'certify_dataset', 'certify_sample', 'certify_sample_scaled',
    'certify_glvq', 'build_model', 'compute_gradients', 'fit', 'grad_check',
    'evaluate_accuracy', 'pgd_l2', 'prior_divergence', 'robustness_curve',
]
