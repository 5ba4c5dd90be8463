"""Adam against a scalar reference, and the halving schedule."""

import math

import numpy as np
import pytest

from dmp.errors import ConfigurationError, UsageError
from dmp.optim import Adam, AdamState, OptimSchedule, adam_step
from dmp.tensor import Tensor


def scalar_adam(grads, lr, b1=0.9, b2=0.999, eps=1e-8, x=0.0):
    """Textbook bias-corrected Adam on one scalar."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return x


class TestAdam:
    def test_matches_scalar_reference(self):
        grads = [0.3, -1.2, 0.05, 2.0, -0.7]
        p = Tensor(np.zeros(1), requires_grad=True, dtype=np.float64)
        state = AdamState.like(p)
        for g in grads:
            p.grad = np.array([g])
            adam_step(p, state, 1e-2)
        assert p.data[0] == pytest.approx(scalar_adam(grads, 1e-2), rel=1e-12, abs=1e-15)

    def test_first_step_is_lr_times_sign(self):
        p = Tensor(np.array([1.0, 1.0]), requires_grad=True, dtype=np.float64)
        p.grad = np.array([5.0, -0.001])
        adam_step(p, AdamState.like(p), 0.1)
        np.testing.assert_allclose(p.data, [0.9, 1.1], rtol=1e-6)

    def test_missing_gradient(self):
        p = Tensor(np.zeros(2), requires_grad=True)
        with pytest.raises(UsageError):
            adam_step(p, AdamState.like(p), 0.1)

    def test_unreached_parameter_uses_zero_gradient(self):
        p = Tensor(np.ones(3), requires_grad=True, dtype=np.float64)
        opt = Adam([p])
        opt.step(0.1)
        np.testing.assert_array_equal(p.data, 1)


class TestSchedule:
    def test_halving(self):
        s = OptimSchedule(lr0=3e-3)
        assert [s.lr(t) for t in (0, 299, 300, 599, 600)] == [3e-3, 3e-3, 1.5e-3, 1.5e-3, 7.5e-4]

    def test_defaults(self):
        s = OptimSchedule()
        assert (s.max_iters, s.lr0, s.halve_every, s.beta1, s.beta2, s.eps) == (2000, 3e-3, 300, 0.9, 0.999, 1e-8)
        p = OptimSchedule.pretrained()
        assert (p.max_iters, p.lr0) == (300, 1e-5)

    @pytest.mark.parametrize("kw", [dict(lr0=0), dict(halve_every=0), dict(max_iters=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            OptimSchedule(**kw)
