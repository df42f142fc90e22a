"""
Central finite-difference verification of tape gradients.
"""

import logging
from typing import Callable, Sequence

import numpy as np

from core.tensor import Tape, Tensor, no_grad

logger = logging.getLogger(__name__)


def numerical_gradient(fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5) -> np.ndarray:
    """d fn() / d param by central differences; fn re-reads param.data on each call."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn().item()
            flat[i] = orig - eps
            minus = fn().item()
            flat[i] = orig
            out[i] = (plus - minus) / (2.0 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / (||a|| + ||n||), zero when both vanish."""
    denom = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5, tol: float = 1e-4):
    """
    Compare tape gradients of a scalar-valued fn against central differences.

    Returns (ok, worst_error, errors_by_param_index).
    """
    params = list(params)
    with Tape() as tape:
        loss = fn()
    analytic = tape.backward(loss, params)
    errors = []
    for p, g in zip(params, analytic):
        numeric = numerical_gradient(fn, p, eps)
        errors.append(relative_error(g, numeric))
    worst = max(errors) if errors else 0.0
    if worst >= tol:
        logger.warning(f"Gradient check failed: worst relative error {worst:.3e} >= {tol:.0e}")
    return worst < tol, worst, errors
