"""Central finite-difference checks for the hand-written gradients."""

from __future__ import annotations

import numpy as np

from . import objective
from .models import encoders

# Denominator floor: tensors whose true gradient is structurally zero (e.g. the
# attention key bias, which shifts every logit of a softmax row equally) would
# otherwise turn rounding noise into a huge relative error.
ERROR_FLOOR = 1e-4


def numerical_gradient(loss_fn, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``loss_fn()`` w.r.t. every entry of ``array``
    (perturbed in place and restored)."""
    grad = np.zeros_like(array)
    flat, gflat = array.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        plus = loss_fn()
        flat[i] = orig - step
        minus = loss_fn()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = ERROR_FLOOR) -> float:
    """max |a - n| / max(max |a|, max |n|, floor)."""
    scale = max(float(np.abs(analytic).max(initial=0.0)), float(np.abs(numeric).max(initial=0.0)),
                floor)
    return float(np.abs(analytic - numeric).max(initial=0.0)) / scale


def check_model_gradients(params, model_config, batch, loss_config, reduction="mean",
                          step: float = 1e-5) -> dict[str, float]:
    """Relative error of ``objective.loss_and_grad`` against central
    differences of the combined loss, per parameter tensor."""
    _, grads = objective.loss_and_grad(params, model_config, batch, loss_config, reduction)

    def loss():
        return objective.combined_loss(params, model_config, batch, loss_config,
                                       reduction).combined

    return {name: relative_error(grads[name], numerical_gradient(loss, params[name], step))
            for name in params}


def random_params(config: encoders.ModelConfig, seed: int, scale: float = 0.4):
    """Gaussian parameters larger than the initialization range, so that every
    nonlinearity is exercised away from its linear regime."""
    rng = np.random.default_rng(seed)
    return {k: rng.normal(0.0, scale, s) for k, s in encoders.param_shapes(config).items()}
