import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax as _softmax

logger = logging.getLogger(__name__)

# Lower clamp for ln and sqrt arguments
CLAMP_FLOOR = 1e-30


@dataclass
class ClampCounter:
    """Counts how often a ln/sqrt argument had to be clamped."""
    log_clamps: int = 0
    sqrt_clamps: int = 0

    @property
    def total(self) -> int:
        return self.log_clamps + self.sqrt_clamps

    def reset(self):
        self.log_clamps = 0
        self.sqrt_clamps = 0


def softmax(v, axis: int = -1):
    """Max-shifted softmax; entries equal to -inf map to exactly 0."""
    return _softmax(np.asarray(v, dtype=float), axis=axis)


def softmax_backward(probs, grad_probs, axis: int = -1):
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    inner = np.sum(probs * grad_probs, axis=axis, keepdims=True)
    return probs * (grad_probs - inner)


def softplus(x):
    return np.logaddexp(0.0, np.asarray(x, dtype=float))


def softplus_grad(x):
    return expit(np.asarray(x, dtype=float))


def inverse_softplus(y):
    y = np.asarray(y, dtype=float)
    if np.any(y <= 0):
        raise ValueError("softplus is only invertible for positive values")
    # log(exp(y) - 1) written to stay finite for large y
    return y + np.log(-np.expm1(-y))
