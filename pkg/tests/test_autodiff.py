"""Per-primitive gradient checks and tape behavior."""

import numpy as np
import pytest

from drape import autodiff as ad


def fd(loss_fn, arrays, h=1e-6):
    """Central-difference gradients of a scalar function of raw arrays."""
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.ravel()
        for i in range(a.size):
            orig = a.flat[i]
            a.flat[i] = orig + h
            hi = loss_fn(*arrays)
            a.flat[i] = orig - h
            lo = loss_fn(*arrays)
            a.flat[i] = orig
            flat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def check(op, *arrays, tol=1e-6, h=1e-6):
    """Compare tape gradients of sum(op(...) * coeff) against differences."""
    rng = np.random.default_rng(0)
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    coeff = rng.normal(size=out.shape)
    ad.backward(ad.sum_(out * coeff))

    def scalar(*raw):
        return float(ad.sum_(op(*[ad.Tensor(r) for r in raw]) * coeff).data)

    for t, g in zip(tensors, fd(scalar, list(arrays), h=h)):
        err = np.abs(t.grad - g).max() / max(np.abs(g).max(), 1e-10)
        assert err < tol, f"max rel grad err {err}"


RNG = np.random.default_rng(42)
A23 = RNG.normal(size=(2, 3))
B23 = RNG.normal(size=(2, 3))
ROW = RNG.normal(size=(3,))
POS = np.abs(RNG.normal(size=(2, 3))) + 0.5


def test_add_sub_mul_div_grads():
    check(lambda a, b: a + b, A23.copy(), B23.copy())
    check(lambda a, b: a - b, A23.copy(), B23.copy())
    check(lambda a, b: a * b, A23.copy(), B23.copy())
    check(lambda a, b: a / b, A23.copy(), POS.copy())


def test_broadcast_grads_are_summed():
    # (2, 3) * (3,) must reduce the row gradient over the broadcast axis
    check(lambda a, b: a * b, A23.copy(), ROW.copy())
    a = ad.Tensor(A23.copy(), requires_grad=True)
    b = ad.Tensor(ROW.copy(), requires_grad=True)
    ad.backward(ad.sum_(a * b))
    assert b.grad.shape == (3,)
    np.testing.assert_allclose(b.grad, A23.sum(axis=0))


def test_scalar_mixing_and_reflected_ops():
    a = ad.Tensor(np.array([2.0, 4.0]), requires_grad=True)
    out = (1.0 - a) * 3.0 + 2.0 / a
    ad.backward(ad.sum_(out))
    np.testing.assert_allclose(out.data, (1.0 - a.data) * 3.0 + 2.0 / a.data)
    np.testing.assert_allclose(a.grad, -3.0 - 2.0 / a.data ** 2)


def test_power_neg_grads():
    check(lambda a: a ** 3, A23.copy())
    check(lambda a: -a, A23.copy())
    check(lambda a: a ** -1.5, POS.copy())


def test_matmul_grads():
    x = RNG.normal(size=(4, 3))
    y = RNG.normal(size=(3, 5))
    check(lambda a, b: a @ b, x, y)
    np.testing.assert_allclose((ad.Tensor(x) @ ad.Tensor(y)).data, x @ y)


def test_batched_matmul_grads():
    x = RNG.normal(size=(2, 4, 3))
    y = RNG.normal(size=(2, 3, 2))
    check(lambda a, b: a @ b, x, y)


def test_contract_embed_matches_tensordot():
    vec = RNG.normal(size=(5,))
    table = RNG.normal(size=(5, 7, 3))
    out = ad.contract_embed(ad.Tensor(vec), ad.Tensor(table))
    np.testing.assert_allclose(out.data, np.tensordot(vec, table, axes=1))
    check(ad.contract_embed, vec.copy(), table.copy())


def test_contract_embed_shape_mismatch():
    with pytest.raises(ValueError):
        ad.contract_embed(ad.Tensor(np.zeros(4)), ad.Tensor(np.zeros((5, 2, 3))))


def test_take_accumulates_repeated_indices():
    idx = np.array([0, 2, 2, 1])
    check(lambda a: ad.take(a, idx), RNG.normal(size=(3, 2)))
    a = ad.Tensor(np.arange(6.0).reshape(3, 2), requires_grad=True)
    ad.backward(ad.sum_(ad.take(a, idx)))
    np.testing.assert_array_equal(a.grad, [[1, 1], [1, 1], [2, 2]])


def test_getitem_slice_and_fancy():
    check(lambda a: a[1:], A23.copy())
    check(lambda a: a[np.array([0, 0, 1])], A23.copy())


def test_concatenate_stack_reshape_transpose():
    check(lambda a, b: ad.concatenate([a, b], axis=0), A23.copy(), B23.copy())
    check(lambda a, b: ad.concatenate([a, b], axis=1), A23.copy(), B23.copy())
    check(lambda a, b: ad.stack([a, b], axis=1), A23.copy(), B23.copy())
    check(lambda a: ad.reshape(a, (3, 2)), A23.copy())
    check(lambda a: ad.transpose(a, (1, 0)), A23.copy())


def test_elementwise_unary_grads():
    check(ad.relu, A23.copy() + 0.05)  # keep away from the kink
    check(ad.sigmoid, A23.copy())
    check(ad.exp, A23.copy())
    check(ad.log, POS.copy())
    check(ad.sqrt, POS.copy())
    check(ad.sin, A23.copy())
    check(ad.cos, A23.copy())


def test_relu_zero_at_negative():
    a = ad.Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum_(ad.relu(a)))
    np.testing.assert_array_equal(a.grad, [0.0, 1.0])


def test_atan2_grads_all_quadrants():
    y = np.array([0.3, -0.7, 0.9, -0.2])
    x = np.array([0.8, 0.5, -0.6, -0.9])
    check(ad.atan2, y, x)
    out = ad.atan2(ad.Tensor(y), ad.Tensor(x))
    np.testing.assert_allclose(out.data, np.arctan2(y, x))


def test_cross_skew_grads():
    a = RNG.normal(size=(4, 3))
    b = RNG.normal(size=(4, 3))
    check(ad.cross, a.copy(), b.copy())
    check(ad.skew, a.copy())
    # skew(r) @ v == r x v
    sk = ad.skew(ad.Tensor(a)).data
    np.testing.assert_allclose((sk @ b[..., None])[..., 0], np.cross(a, b),
                               atol=1e-15)


def test_vnorm_grads_and_axes():
    a = RNG.normal(size=(4, 3)) + 0.1
    check(lambda t: ad.vnorm(t, axis=1), a.copy())
    check(lambda t: ad.vnorm(t, axis=0, keepdims=True), a.copy())
    n = ad.vnorm(ad.Tensor(a), axis=None)
    assert n.shape == ()
    np.testing.assert_allclose(n.data, np.linalg.norm(a))


def test_vnorm_zero_vector_subgradient():
    a = ad.Tensor(np.zeros((2, 3)), requires_grad=True)
    ad.backward(ad.sum_(ad.vnorm(a, axis=1)))
    assert np.all(np.isfinite(a.grad)) and np.all(a.grad == 0)


def test_reductions():
    check(lambda a: ad.sum_(a, axis=0), A23.copy())
    check(lambda a: ad.sum_(a, axis=1, keepdims=True), A23.copy())
    check(lambda a: ad.mean_(a, axis=1), A23.copy())
    check(ad.mean_, A23.copy())
    t = ad.Tensor(A23)
    np.testing.assert_allclose(t.mean(axis=0).data, A23.mean(axis=0))
    np.testing.assert_allclose(t.sum().data, A23.sum())


def test_rot_coeffs_both_branches_and_continuity():
    # values against the defining formulas on the closed-form branch
    s = np.array([0.5, 2.0, 9.0])
    u = np.sqrt(s)
    np.testing.assert_allclose(ad.rot_coeff_a(ad.Tensor(s)).data, np.sin(u) / u,
                               rtol=1e-14)
    np.testing.assert_allclose(ad.rot_coeff_b(ad.Tensor(s)).data,
                               (1.0 - np.cos(u)) / s, rtol=1e-14)
    # series branch near zero stays finite and matches the limit
    tiny = np.array([0.0, 1e-9, 1e-5])
    np.testing.assert_allclose(ad.rot_coeff_a(ad.Tensor(tiny)).data,
                               [1.0, 1.0, 1.0 - 1e-5 / 6], rtol=1e-9)
    np.testing.assert_allclose(ad.rot_coeff_b(ad.Tensor(tiny)).data[0], 0.5)
    # series output just below the cutoff matches the closed form there
    s_edge = np.array([0.999e-4])
    u_edge = np.sqrt(s_edge)
    a_series = ad.rot_coeff_a(ad.Tensor(s_edge)).data
    b_series = ad.rot_coeff_b(ad.Tensor(s_edge)).data
    np.testing.assert_allclose(a_series, np.sin(u_edge) / u_edge, rtol=1e-13)
    # the naive form cancels ~eps/(1-cos u) here; the series is the sharper one
    np.testing.assert_allclose(b_series, (1 - np.cos(u_edge)) / s_edge,
                               rtol=1e-11)
    check(ad.rot_coeff_a, np.array([1e-6, 5e-5, 0.3, 4.0]))
    check(ad.rot_coeff_b, np.array([1e-6, 5e-5, 0.3, 4.0]))


def test_diamond_graph_accumulates_both_paths():
    a = ad.Tensor(np.array(3.0), requires_grad=True)
    b = a * 2.0
    loss = b * a  # 2 a^2 -> d/da = 4a
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, 12.0)


def test_backward_twice_is_bitwise_identical():
    a = ad.Tensor(RNG.normal(size=(5, 3)), requires_grad=True)
    loss = ad.sum_(ad.sigmoid(a @ a.reshape(3, 5)) * 2.0)
    ad.backward(loss)
    first = a.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(a.grad, first)


def test_backward_requires_scalar_root():
    a = ad.Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        ad.backward(a * 2.0)


def test_detach_blocks_gradient():
    a = ad.Tensor(np.array([1.5]), requires_grad=True)
    loss = ad.sum_(a.detach() * a)
    ad.backward(loss)
    np.testing.assert_allclose(a.grad, [1.5])


def test_no_grad_inputs_record_nothing():
    a = ad.Tensor(np.ones(3))
    out = ad.exp(a) * 2.0
    assert not out.requires_grad and out._parents == ()


def test_custom_op_routes_gradient():
    a = ad.Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def bwd(g):
        a.grad += 3.0 * g

    out = ad.custom(a.data * 3.0, (a,), bwd)
    ad.backward(ad.sum_(out))
    np.testing.assert_allclose(a.grad, [3.0, 3.0])
