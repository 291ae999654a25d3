"""Adam and learning-rate schedule checks against independent formulas."""

import math

import numpy as np
import pytest

from fdmpaint.autodiff import Tensor, Tape
from fdmpaint.errors import ContractError, GradientError
from fdmpaint.optim import Adam, WarmupCosineSchedule


def reference_adam_update(param, grad, lr, beta1, beta2, eps, m, v, t):
    """Straight transcription of the bias-corrected Adam update."""
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return param - lr * mhat / (math.sqrt(vhat) + eps), m, v


def test_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.zeros(2)
    before = p.data.copy()
    opt.step()
    np.testing.assert_array_equal(p.data, before)


def test_scalar_step_matches_reference_formula():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.1)
    p.grad = np.array([1.0])
    opt.step()
    expected, _, _ = reference_adam_update(1.0, 1.0, 0.1, 0.0, 0.9, 1e-8, 0.0, 0.0, 1)
    np.testing.assert_allclose(p.data, [expected], rtol=1e-6)
    # second step with a different gradient, tracking moments by hand
    ref, m, v = reference_adam_update(1.0, 1.0, 0.1, 0.0, 0.9, 1e-8, 0.0, 0.0, 1)
    p.grad = np.array([-0.5])
    opt.step()
    ref, m, v = reference_adam_update(ref, -0.5, 0.1, 0.0, 0.9, 1e-8, m, v, 2)
    np.testing.assert_allclose(p.data, [ref], rtol=1e-6)


def test_converges_on_quadratic():
    p = Tensor(np.array([3.0]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.2)
    for _ in range(100):
        opt.zero_grad()
        with Tape() as tape:
            loss = (p * p).sum()
        tape.backward(loss)
        opt.step()
    assert abs(p.data[0]) < 0.5


def test_nan_gradient_aborts_naming_parameter():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"fdm.blocks.0.conv3.w": p}, lr=0.1)
    p.grad = np.array([np.nan])
    with pytest.raises(GradientError, match="fdm.blocks.0.conv3.w"):
        opt.step()


def test_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(9)
        p = Tensor(rng.standard_normal(8).astype(np.float32), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-2)
        trace = []
        for _ in range(10):
            opt.zero_grad()
            with Tape() as tape:
                loss = ((p - 0.3) * (p - 0.3)).sum()
            tape.backward(loss)
            opt.step()
            trace.append(p.data.copy())
        return np.stack(trace)

    a, b = run(), run()
    assert a.dtype == np.float32
    np.testing.assert_array_equal(a, b)  # bit-identical


def test_schedule_endpoints():
    sched = WarmupCosineSchedule(total_epochs=10)
    assert sched.at(0.0) == 0.0
    assert sched.at(1.0) == pytest.approx(2e-4)
    assert abs(sched.at(10.0)) < 1e-12


def test_schedule_monotone_warmup_and_nonnegative():
    sched = WarmupCosineSchedule(total_epochs=5, peak_lr=2e-4)
    pts = np.linspace(0, 1, 50)
    vals = [sched.at(p) for p in pts]
    assert all(b >= a for a, b in zip(vals, vals[1:]))
    full = [sched.at(p) for p in np.linspace(0, 5, 200)]
    assert min(full) >= 0.0
    # decays after warmup
    assert sched.at(3.0) < sched.at(1.0)


def test_schedule_rejects_negative():
    sched = WarmupCosineSchedule(total_epochs=3)
    with pytest.raises(ContractError):
        sched.at(-0.1)
    with pytest.raises(ContractError):
        sched.at(3.5)
