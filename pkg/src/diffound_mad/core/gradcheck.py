"""Central finite-difference gradient oracle."""

import logging
from typing import Callable, Dict, Sequence

import numpy as np

from diffound_mad.core.tensor import Node, backward, zero_grad
from diffound_mad.errors import ContractError

logger = logging.getLogger(__name__)


def analytic_gradients(f: Callable[[], Node], params: Sequence[Node]) -> Dict[int, np.ndarray]:
    """Run one reverse pass of ``f`` and return each parameter's gradient."""
    zero_grad(params)
    backward(f())
    grads = {id(p): (p.grad if p.grad is not None else np.zeros_like(p.value)) for p in params}
    zero_grad(params)
    return grads


def finite_difference_check(
    f: Callable[[], Node],
    params: Sequence[Node],
    h: float = 1e-5,
    atol: float = 0.0,
) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` rebuilds the graph from ``params`` on every call and returns a scalar
    node. The relative error of one element is
    ``|analytic - fd| / max(|analytic|, |fd|, 1e-12)``. Elements where both
    magnitudes are below ``atol`` are skipped; the default ``atol=0`` checks
    every element.
    """
    if h <= 0:
        raise ContractError(f"finite-difference step must be positive, got {h}")
    analytic = analytic_gradients(f, params)
    worst = 0.0
    for param in params:
        base = param.value.copy()
        grad = analytic[id(param)]
        flat = base.reshape(-1)
        try:
            for i in range(flat.size):
                bumped = flat.copy()
                bumped[i] += h
                param.assign(bumped.reshape(base.shape))
                f_plus = f().item()
                bumped[i] -= 2 * h
                param.assign(bumped.reshape(base.shape))
                f_minus = f().item()
                fd = (f_plus - f_minus) / (2 * h)
                an = float(grad.reshape(-1)[i])
                if abs(an) < atol and abs(fd) < atol:
                    continue
                err = abs(an - fd) / max(abs(an), abs(fd), 1e-12)
                if err > worst:
                    worst = err
        finally:
            param.assign(base)
    logger.debug("finite-difference check over %d params: max rel err %.3e", len(params), worst)
    return worst
