"""Central finite-difference oracle for checking analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, mul, sum_


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.ndim == 0:
        return out
    return sum_(mul(out, Tensor(weights, dtype=out.dtype)))


def max_relative_error(
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    *,
    seed: int = 0,
    h: float = 1e-3,
    wrt: Sequence[int] | None = None,
) -> float:
    """Largest ``|analytic - fd| / (|fd| + 1e-6)`` over all input elements.

    Inputs are copied to float64 before both the analytic and the numerical
    pass. Non-scalar outputs are reduced with fixed random weights so every
    output element contributes.
    """
    shadows = [np.array(x, dtype=np.float64) for x in inputs]
    wrt = list(range(len(shadows))) if wrt is None else list(wrt)

    tensors = [Tensor(x, requires_grad=i in wrt, dtype=np.float64) for i, x in enumerate(shadows)]
    out = fn(*tensors)
    weights = np.random.default_rng([seed, 0x5CA1]).standard_normal(out.shape)
    _scalarize(out, weights).backward(wrt=[tensors[i] for i in wrt])

    def value() -> float:
        ts = [Tensor(x, dtype=np.float64) for x in shadows]
        return float(_scalarize(fn(*ts), weights).data)

    worst = 0.0
    for i in wrt:
        analytic = tensors[i].grad
        x = shadows[i]
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = value()
            flat[j] = orig - h
            down = value()
            flat[j] = orig
            fd = (up - down) / (2 * h)
            err = abs(analytic.reshape(-1)[j] - fd) / (abs(fd) + 1e-6)
            worst = max(worst, err)
    return worst
