"""
Adam with bias-corrected moment estimates.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from core.errors import DimensionError, OptimizerError
from engines.gradcore import Parameter

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray], state: AdamState) -> AdamState:
    """
    Applies one Adam update to every parameter and advances the step counter.
    Gradients are validated before anything is touched, so a rejected step
    leaves parameters and moments unchanged.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} parameters but {len(grads)} gradients")
    for param, grad in zip(params, grads):
        if grad.shape != param.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match parameter '{param.name}' {param.shape}")
        if not np.all(np.isfinite(grad)):
            raise OptimizerError(param.name)

    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    step_size = state.learning_rate / bc1

    for param, grad in zip(params, grads):
        key = param.name
        if key not in state.m:
            state.m[key] = np.zeros_like(param.data)
            state.v[key] = np.zeros_like(param.data)

        state.m[key] *= state.beta1
        state.m[key] += (1.0 - state.beta1) * grad
        state.v[key] *= state.beta2
        state.v[key] += (1.0 - state.beta2) * (grad * grad)

        denom = np.sqrt(state.v[key] / bc2) + state.epsilon
        param.assign(param.data - step_size * state.m[key] / denom)
    return state
