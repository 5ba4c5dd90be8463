"""Adam with a step-halving learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, UsageError
from .tensor import Tensor


@dataclass
class AdamState:
    """Moment buffers for one parameter."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param: Tensor, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros_like(param.data), np.zeros_like(param.data), 0, beta1, beta2, eps)


def adam_step(param: Tensor, state: AdamState, lr: float) -> None:
    """Apply one bias-corrected Adam update to ``param`` in place."""
    if param.grad is None:
        raise UsageError(f"adam_step: parameter {param.name or ''} has no gradient")
    if state.m.shape != param.shape:
        raise UsageError("adam_step: state shape does not match parameter")
    g = param.grad
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    state.m *= b1
    state.m += (1 - b1) * g
    state.v *= b2
    state.v += (1 - b2) * (g * g)
    denom = np.sqrt(state.v / (1 - b2 ** state.t))
    denom += state.eps
    update = (lr / (1 - b1 ** state.t)) * state.m / denom
    param.data = (param.data - update).astype(param.data.dtype, copy=False)


class Adam:
    """One Adam instance over a list of parameters (single parameter group)."""

    def __init__(self, params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.states = [AdamState.like(p, beta1, beta2, eps) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                # unreachable parameter this iteration: treat as zero gradient
                p.grad = np.zeros_like(p.data)
            adam_step(p, s, lr)


@dataclass
class OptimSchedule:
    """Iteration budget and learning-rate schedule for one pair."""

    max_iters: int = 2000
    lr0: float = 3e-3
    halve_every: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    snapshot_every: int = 10
    patience: int | None = None
    min_improvement: float = 1e-4

    def __post_init__(self):
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")
        if self.halve_every < 1 or self.lr0 <= 0:
            raise ConfigurationError("halve_every must be >= 1 and lr0 > 0")

    def lr(self, t: int) -> float:
        return self.lr0 / 2 ** (t // self.halve_every)

    @classmethod
    def pretrained(cls, **overrides) -> "OptimSchedule":
        kw = dict(max_iters=300, lr0=1e-5)
        kw.update(overrides)
        return cls(**kw)


__all__ = ["Adam", "AdamState", "OptimSchedule", "adam_step"]
