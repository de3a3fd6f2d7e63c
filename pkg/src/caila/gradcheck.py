"""
caila.gradcheck
~~~~~~~~~~~~~~~

Finite-difference verification of the gradients recorded by :mod:`caila.tensor`.
"""

import logging
from typing import Callable, Optional

import numpy as np

from .exceptions import ContractError, ParameterError
from .tensor import Tape, Tensor, backward, precision

LOGGER = logging.getLogger("caila")


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Compare the tape gradient of a scalar function with central differences.

    ``x`` is perturbed in place, so ``f`` may also reach it through a closure
    (e.g. a model parameter). The check runs in double precision and restores
    ``x`` afterwards.

    Args:
        f (Callable[[Tensor], Tensor]): differentiable map returning a scalar tensor
        x (Tensor): point at which the gradient is checked
        eps (float, optional): central difference step, in (0, 0.1]. Defaults to 1e-3.
        samples (Optional[int], optional): check only this many random components. Defaults to all.
        seed (int, optional): seed for component sampling. Defaults to 0.

    Raises:
        ParameterError: eps outside (0, 0.1]
        ContractError: f does not return a scalar

    Returns:
        float: max over components of |analytic - numeric| / max(1, |numeric|)
    """
    if not 0 < eps <= 0.1:
        raise ParameterError(f"grad_check eps must be in (0, 0.1], got {eps}")

    saved_data, saved_flag = x.data, x.requires_grad
    worst = 0.0
    with precision(np.float64):
        try:
            x.data = saved_data.astype(np.float64)
            x.set_requires_grad(True)
            x.zero_grad()
            tape = Tape()
            with tape.recording():
                out = f(x)
            if out.size != 1:
                raise ContractError(f"grad_check needs a scalar function, got output shape {out.shape}")
            backward(out, tape)
            assert x.grad is not None
            analytic = x.grad.reshape(-1).copy()

            flat = x.data.reshape(-1)
            components = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                components = np.random.default_rng(seed).choice(flat.size, size=samples, replace=False)
            for i in components:
                original = flat[i]
                flat[i] = original + eps
                plus = f(x).item()
                flat[i] = original - eps
                minus = f(x).item()
                flat[i] = original
                numeric = (plus - minus) / (2 * eps)
                worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
        finally:
            x.data = saved_data
            x.set_requires_grad(saved_flag)
            x.zero_grad()
    LOGGER.debug(f"grad_check over {len(components)} components: max relative error {worst:.3e}")
    return worst
