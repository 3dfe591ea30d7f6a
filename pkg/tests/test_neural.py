import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from locembed.neural import (AdamState, adam_step, finite_diff_check, linear_backward, logsumexp_rows, softmax_rows,
                             uniform_init)


def test_adam_first_step_is_learning_rate():
    p = {"w": np.array([0.0])}
    state = AdamState.for_params(p, learning_rate=1e-4)
    new, state = adam_step(p, {"w": np.array([1.0])}, state)
    # m_hat = 1, v_hat = 1 after bias correction
    assert new["w"][0] == pytest.approx(-1e-4 / (1 + 1e-8), abs=1e-16)
    assert state.step == 1


def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([0.3, -2.0])}
    new, _ = adam_step(p, {"w": np.zeros(2)}, AdamState.for_params(p))
    np.testing.assert_array_equal(new["w"], p["w"])


def test_adam_three_step_trajectory():
    # hand recurrence evaluated at 40 digits: m_t = 1 - 0.9^t, v_t = 1 - 0.999^t, so each step is -lr/(1+eps)
    expected = [-0.0000999999990000000099999999, -0.0001999999980000000199999998, -0.0002999999970000000299999997]
    p = {"w": np.array([0.0])}
    state = AdamState.for_params(p, learning_rate=1e-4)
    for want in expected:
        p, state = adam_step(p, {"w": np.array([1.0])}, state)
        assert abs(p["w"][0] - want) < 1e-12


def test_adam_rejects_nan_gradient_by_name():
    p = {"layer.W": np.zeros(3)}
    with pytest.raises(FloatingPointError, match="layer.W"):
        adam_step(p, {"layer.W": np.array([0.0, np.nan, 0.0])}, AdamState.for_params(p))


def test_adam_does_not_mutate_inputs():
    p = {"w": np.array([1.0, 2.0])}
    g = {"w": np.array([0.5, -0.5])}
    state = AdamState.for_params(p)
    before = (p["w"].copy(), state.m["w"].copy())
    a, sa = adam_step(p, g, state)
    b, sb = adam_step(p, g, state)
    np.testing.assert_array_equal(p["w"], before[0])
    np.testing.assert_array_equal(state.m["w"], before[1])
    np.testing.assert_array_equal(a["w"], b["w"])
    assert np.all(sa.v["w"] >= 0)


def test_softmax_uniform_and_overflow():
    np.testing.assert_allclose(softmax_rows(np.full((1, 4), 3.3)), np.full((1, 4), 0.25), atol=1e-15)
    out = softmax_rows(np.array([[1000.0, 0.0]]))
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] < 1e-300


def test_softmax_matches_naive_formula(rng):
    a = rng.normal(size=(3, 3))
    naive = np.exp(a) / np.exp(a).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(softmax_rows(a), naive, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_and_shift_invariance(a, c):
    s = softmax_rows(a)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(softmax_rows(a + c), s, atol=1e-12)


def test_logsumexp_large_values():
    assert logsumexp_rows(np.array([[1000.0, 1000.0]]))[0] == pytest.approx(1000 + np.log(2))


def test_uniform_init_bound(rng):
    w = uniform_init(rng, 50, (50, 20))
    assert np.abs(w).max() <= np.sqrt(3 / 50)


def test_fd_check_quadratic():
    p = {"a": np.array([1.0, -2.0, 0.5]), "b": np.array([[3.0]])}

    def loss(q):
        return 0.5 * sum(float(np.sum(v * v)) for v in q.values()), {k: v.copy() for k, v in q.items()}

    rep = finite_diff_check(loss, p, h=1e-5, tolerance=1e-8)
    assert rep.passed, rep


def test_fd_check_flags_wrong_gradient():
    p = {"a": np.array([1.0, -2.0, 0.5])}

    def loss(q):
        return 0.5 * float(np.sum(q["a"] ** 2)), {"a": 2 * q["a"]}

    rep = finite_diff_check(loss, p, tolerance=1e-4)
    assert not rep.passed
    assert rep.max_rel_error == pytest.approx(0.5, abs=1e-6)


def test_fd_check_rejects_nonfinite_loss():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda q: (float("nan"), {"a": q["a"]}), {"a": np.ones(2)})


def test_linear_backward_directional(rng):
    x, w = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    up = rng.normal(size=(5, 3))

    def f(wv):
        return float(np.sum(up * (x @ wv)))

    _, dw, _ = linear_backward(up, x, w)
    dW = rng.normal(size=w.shape)
    h = 1e-6
    fd = (f(w + h * dW) - f(w - h * dW)) / (2 * h)
    assert np.sum(dw * dW) == pytest.approx(fd, rel=1e-6)


def test_fd_check_value_fn_agrees():
    p = {"a": np.array([0.3, -1.2])}

    def loss(q):
        return float(np.sum(np.sin(q["a"]))), {"a": np.cos(q["a"])}

    full = finite_diff_check(loss, p)
    lean = finite_diff_check(loss, p, value_fn=lambda q: float(np.sum(np.sin(q["a"]))))
    assert full.per_param == lean.per_param and lean.passed
