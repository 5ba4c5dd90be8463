"""Central finite-difference checks of recorded gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_gradient(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-3) -> np.ndarray:
    """d fn() / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    with T.no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + step
            up = fn().item()
            flat[i] = old - step
            down = fn().item()
            flat[i] = old
            out[i] = (up - down) / (2 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(max |n|, floor)."""
    scale = max(float(np.abs(numeric).max(initial=0.0)), floor)
    return float(np.abs(np.asarray(analytic, np.float64) - numeric).max(initial=0.0) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-3) -> float:
    """Largest relative error between backward() and finite differences over ``params``.

    ``fn`` must rebuild the scalar output from the current parameter values.
    """
    for p in params:
        p.grad = None
    T.backward(fn())
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        worst = max(worst, relative_error(analytic, numeric_gradient(fn, p, step)))
    return worst
