"""Adam update math and the finite-difference gradient checker."""

import numpy as np
import pytest

from drape import autodiff as ad
from drape.numerics import (AdamState, GradCheckReport, adam_step, gradcheck,
                            grads_of, make_params)


def test_adam_first_step_has_unit_scale():
    # with bias correction the first update is -lr * g / (|g| + eps)
    params = make_params({"w": np.array([1.0, -2.0, 3.0])})
    g = np.array([0.5, -0.25, 1e-3])
    state = AdamState.for_params(params)
    adam_step(params, {"w": g}, state, lr=0.1)
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12)


def test_adam_two_steps_closed_form():
    params = make_params({"w": np.array([0.0])})
    state = AdamState.for_params(params)
    g1, g2 = np.array([2.0]), np.array([-1.0])
    adam_step(params, {"w": g1}, state, lr=0.01)
    adam_step(params, {"w": g2}, state, lr=0.01)
    b1, b2, eps = 0.9, 0.999, 1e-8
    m = (1 - b1) * g1
    v = (1 - b2) * g1 * g1
    w = -0.01 * (m / (1 - b1)) / (np.sqrt(v / (1 - b2)) + eps)
    m = b1 * m + (1 - b1) * g2
    v = b2 * v + (1 - b2) * g2 * g2
    w = w - 0.01 * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(params["w"].data, w, rtol=1e-12)


def test_adam_sign_flip_antisymmetry():
    # flipping every gradient flips every update exactly
    runs = []
    for sign in (1.0, -1.0):
        params = make_params({"w": np.zeros(4)})
        state = AdamState.for_params(params)
        rng = np.random.default_rng(7)
        for _ in range(5):
            adam_step(params, {"w": sign * rng.normal(size=4)}, state, lr=0.05)
        runs.append(params["w"].data.copy())
    np.testing.assert_array_equal(runs[0], -runs[1])


def test_adam_rejects_nonfinite_and_shape_mismatch():
    params = make_params({"bad": np.zeros(2)})
    state = AdamState.for_params(params)
    with pytest.raises(FloatingPointError, match="bad"):
        adam_step(params, {"bad": np.array([np.nan, 0.0])}, state, lr=0.1)
    with pytest.raises(ValueError, match="shape"):
        adam_step(params, {"bad": np.zeros(3)}, state, lr=0.1)


def test_grads_of_zero_for_unreachable():
    params = make_params({"a": np.ones(2), "unused": np.ones(3)})
    loss = ad.sum_(params["a"] * 2.0)
    grads = grads_of(loss, params)
    np.testing.assert_array_equal(grads["a"], [2.0, 2.0])
    np.testing.assert_array_equal(grads["unused"], np.zeros(3))


def quadratic_loss(params):
    # well-conditioned analytic test function: sum of sigmoid(w) * w
    total = None
    for name in sorted(params):
        p = params[name]
        term = ad.sum_(ad.sigmoid(p) * p)
        total = term if total is None else total + term
    return total


def test_gradcheck_passes_correct_gradients():
    params = make_params({"w": np.linspace(-2, 2, 9), "b": np.array([0.3])})
    report = gradcheck(quadratic_loss, params, step=1e-5, tolerance=1e-6)
    assert isinstance(report, GradCheckReport)
    assert report.passed, report.table()
    assert set(report.per_param) == {"w", "b"}


def test_gradcheck_catches_wrong_gradient():
    def broken(params):
        p = params["w"]

        def bwd(g):
            p.grad += 1.1 * g  # deliberately off by 10%

        return ad.sum_(ad.custom(p.data.copy(), (p,), bwd))

    params = make_params({"w": np.array([0.5, -0.25])})
    report = gradcheck(broken, params, tolerance=1e-4)
    assert not report.passed
    assert report.max_rel_err > 0.05


def test_gradcheck_budget_allocation_deterministic():
    params = make_params({"big": np.random.default_rng(1).normal(size=200),
                          "small": np.array([1.0])})
    r1 = gradcheck(quadratic_loss, params, budget=30, seed=3)
    r2 = gradcheck(quadratic_loss, params, budget=30, seed=3)
    assert r1.per_param == r2.per_param
    checked = sum(n for _, n in r1.per_param.values())
    assert checked <= 30
    assert r1.per_param["small"][1] >= 1  # every parameter gets a coordinate


def test_gradcheck_tolerates_fd_noise_on_large_losses():
    # a loss with a huge constant offset: tiny-gradient coordinates sit
    # below the cancellation noise and must not produce spurious failures
    def offset_loss(params):
        return quadratic_loss(params) * 1e-6 + 1e5

    params = make_params({"w": np.array([0.01, -0.02, 0.5])})
    report = gradcheck(offset_loss, params, step=1e-5, tolerance=1e-4)
    assert report.passed, report.table()


def test_gradcheck_report_table_mentions_params():
    params = make_params({"w": np.array([0.5])})
    report = gradcheck(quadratic_loss, params)
    text = report.table()
    assert "w" in text and ("PASS" in text or "FAIL" in text)
