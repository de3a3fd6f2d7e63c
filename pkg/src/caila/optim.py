"""
caila.optim
~~~~~~~~~~~

Adam with decoupled (or classic L2) weight decay over named tensors.
"""

from dataclasses import dataclass, field
import logging
from typing import Dict, Mapping, Tuple

import numpy as np

from .exceptions import ParameterError, TrainingError
from .tensor import Tensor

LOGGER = logging.getLogger("caila")


@dataclass
class OptimizerState:
    """Per-tensor moment buffers and step counts, keyed by tensor name."""

    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)
    steps: Dict[str, int] = field(default_factory=dict)


def adam_step(
    tensors: Mapping[str, Tensor],
    state: OptimizerState,
    lr: float,
    weight_decay: float = 0.0,
    decoupled: bool = True,
) -> int:
    """Update every tensor of ``tensors`` that requires grad and received one.

    Decoupled decay shrinks the weights directly (``p -= lr * wd * p``);
    otherwise ``wd * p`` is added to the gradient before the moments.

    Raises:
        ParameterError: negative learning rate or weight decay
        TrainingError: a gradient contains NaN or Inf

    Returns:
        int: number of tensors updated
    """
    if lr < 0 or weight_decay < 0:
        raise ParameterError(f"lr and weight_decay must be non-negative, got {lr} and {weight_decay}")
    beta1, beta2 = state.betas
    updated = 0
    for name, t in tensors.items():
        if not t.requires_grad or not t.received_grad:
            continue
        grad = np.asarray(t.grad, dtype=np.float64)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in tensor '{name}'")
        weights = t.data.astype(np.float64)
        if weight_decay and not decoupled:
            grad = grad + weight_decay * weights

        first = state.first.setdefault(name, np.zeros_like(weights))
        second = state.second.setdefault(name, np.zeros_like(weights))
        if first.shape != weights.shape:
            raise TrainingError(f"optimizer buffer for '{name}' has shape {first.shape}, tensor has {weights.shape}")
        step = state.steps.get(name, 0) + 1
        state.steps[name] = step
        first *= beta1
        first += (1 - beta1) * grad
        second *= beta2
        second += (1 - beta2) * grad * grad
        first_hat = first / (1 - beta1 ** step)
        second_hat = second / (1 - beta2 ** step)

        if weight_decay and decoupled:
            weights -= lr * weight_decay * weights
        weights -= lr * first_hat / (np.sqrt(second_hat) + state.eps)
        t.data = weights.astype(t.data.dtype)
        updated += 1
    LOGGER.debug(f"adam step updated {updated} tensors")
    return updated
