import numpy as np
import pytest

from fino.optim import AdamState, adam_step
from fino.tensor import Tensor


def param(v):
    return Tensor(np.array(v, dtype=np.float64), requires_grad=True)


def test_first_step_moves_by_lr():
    p = param([0.0])
    p.grad = np.array([1.0])
    adam_step({"p": p}, AdamState(lr=0.1))
    # m_hat = 1, v_hat = 1  ->  p = -0.1 / (1 + 1e-8)
    assert p.data[0] == pytest.approx(-0.1 / (1.0 + 1e-8), abs=1e-15)


def test_hand_computed_second_step():
    p = param([0.0])
    st = AdamState(lr=0.1)
    p.grad = np.array([1.0])
    adam_step({"p": p}, st)
    p.grad = np.array([-2.0])
    adam_step({"p": p}, st)
    m = 0.9 * 0.1 + 0.1 * -2.0
    v = 0.999 * 0.001 + 0.001 * 4.0
    mhat, vhat = m / (1 - 0.81), v / (1 - 0.999**2)
    expected = -0.1 / (1.0 + 1e-8) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-14)


def test_zero_gradient_leaves_params_unchanged(rng):
    init = rng.standard_normal((3, 3))
    p = param(init.copy())
    st = AdamState()
    for _ in range(10):
        p.grad = np.zeros((3, 3))
        adam_step({"p": p}, st)
    assert np.array_equal(p.data, init)


def test_non_finite_gradient_named_and_nothing_moves():
    a, b = param([1.0]), param([2.0])
    a.grad = np.array([0.5])
    b.grad = np.array([np.nan])
    st = AdamState()
    with pytest.raises(FloatingPointError, match="'b'"):
        adam_step({"a": a, "b": b}, st)
    assert a.data[0] == 1.0 and st.step_count == 0


def test_deterministic(rng):
    grads = [rng.standard_normal(4) for _ in range(5)]

    def run():
        p, st = param(np.ones(4)), AdamState()
        for g in grads:
            p.grad = g.copy()
            adam_step({"p": p}, st)
        return p.data

    assert np.array_equal(run(), run())
