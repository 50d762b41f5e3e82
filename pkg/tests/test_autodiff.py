import numpy as np
import pytest

from hypermpc import autodiff as ad

from conftest import check_gradients, tape_gradients


def test_add_elementwise():
    out = ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_matmul_identity():
    v = np.array([[0.3], [-1.2], [2.0]])
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(v))
    np.testing.assert_array_equal(out.data, v)


def test_tanh_origin_value_and_derivative():
    tape = ad.Tape()
    with tape:
        x = tape.watch(np.zeros(()))
        y = ad.tanh(x)
        assert float(y.data) == 0.0
        (g,) = tape.gradients(y, [x])
    assert float(g) == 1.0


def test_quadratic_form_gradient():
    w = np.array([1.0, 2.0, 3.0])
    _, (g,) = tape_gradients(lambda t: ad.reduce_sum(ad.mul(t, t)), [w])
    np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])


def test_recurrence_gradient_matches_finite_differences():
    x0 = np.ones(())

    def build(a):
        x = ad.Tensor(x0)
        vals = []
        for _ in range(10):
            x = ad.mul(a, x)
            vals.append(ad.reshape(x, (1,)))
        return ad.reduce_mean(ad.concat(vals, axis=0))

    check_gradients(build, [np.array(0.9)], rtol=1e-6)


def test_linear_recurrence_matches_chain_rule_expansion():
    # x_k = a^k x0, loss = x_K: d loss/d a = K a^(K-1) x0
    x0 = 0.7
    a_val = 1.13
    for k in range(1, 21):
        def build(a):
            x = ad.Tensor(np.array(x0))
            for _ in range(k):
                x = ad.mul(a, x)
            return x

        _, (g,) = tape_gradients(build, [np.array(a_val)])
        expected = k * a_val ** (k - 1) * x0
        np.testing.assert_allclose(g, expected, rtol=1e-12)


def test_constant_loss_gives_zero_gradients():
    _, (g,) = tape_gradients(lambda w: ad.reduce_sum(ad.mul(w, 0.0)), [np.array([1.0, 2.0])])
    np.testing.assert_array_equal(g, [0.0, 0.0])


def test_unreached_leaf_gets_zeros():
    tape = ad.Tape()
    with tape:
        a = tape.watch(np.array([1.0, 2.0]))
        b = tape.watch(np.array([3.0]))
        loss = ad.reduce_sum(ad.square(a))
        grads = tape.gradients(loss, [a, b])
    np.testing.assert_array_equal(grads[1], [0.0])


def test_non_scalar_loss_rejected():
    tape = ad.Tape()
    with tape:
        a = tape.watch(np.array([1.0, 2.0]))
        out = ad.square(a)
        with pytest.raises(ad.TapeError, match="scalar"):
            tape.backward(out)


def test_detached_loss_rejected():
    tape = ad.Tape()
    with tape:
        tape.watch(np.array([1.0]))
        with pytest.raises(ad.TapeError, match="detached"):
            tape.backward(ad.Tensor(np.array(1.0)))


def test_tape_consumed_once():
    tape = ad.Tape()
    with tape:
        a = tape.watch(np.array(2.0))
        loss = ad.square(a)
        tape.backward(loss)
        with pytest.raises(ad.TapeError, match="consumed"):
            tape.backward(loss)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeMismatch, match=r"add.*\(2,\).*\(3,\)"):
        ad.add(ad.Tensor([1.0, 2.0]), ad.Tensor([1.0, 2.0, 3.0]))
    with pytest.raises(ad.ShapeMismatch, match="matmul"):
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))


def test_non_finite_output_raises_numerical_fault():
    with pytest.raises(ad.NumericalFault, match="exp"):
        ad.exp(ad.Tensor(np.array(1e4)))
    with pytest.raises(ad.NumericalFault, match="mul"):
        ad.mul(ad.Tensor(np.array(1e308)), ad.Tensor(np.array(1e308)))


def test_determinism_bitwise(rng):
    def run():
        r = np.random.default_rng(7)
        x = r.normal(size=(4, 4))
        w = r.normal(size=(4, 4))
        loss, grads = tape_gradients(
            lambda a, b: ad.reduce_sum(ad.square(ad.tanh(ad.matmul(a, b)))), [x, w])
        return loss, grads

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for a, b in zip(g1, g2):
        np.testing.assert_array_equal(a, b)


@pytest.mark.parametrize("op,n_inputs", [
    (ad.exp, 1), (ad.tanh, 1), (ad.sigmoid, 1), (ad.sin, 1), (ad.cos, 1),
    (ad.square, 1), (ad.neg, 1), (ad.add, 2), (ad.sub, 2), (ad.mul, 2),
])
def test_elementwise_gradients_match_finite_differences(op, n_inputs, rng):
    shapes = [(3,), (2, 4), (4, 4, 2)]
    for shape in shapes:
        arrays = [rng.uniform(-2, 2, shape) for _ in range(n_inputs)]
        weights = rng.normal(size=shape)

        def build(*ts):
            return ad.reduce_sum(ad.mul(op(*ts), ad.Tensor(weights)))

        check_gradients(build, arrays, rtol=1e-5, atol=1e-9)


def test_abs_and_relu_gradients_away_from_kink(rng):
    x = rng.uniform(0.5, 2.0, (8,)) * rng.choice([-1.0, 1.0], size=8)
    w = rng.normal(size=8)
    check_gradients(lambda t: ad.reduce_sum(ad.mul(ad.absolute(t), ad.Tensor(w))), [x])
    check_gradients(lambda t: ad.reduce_sum(ad.mul(ad.relu(t), ad.Tensor(w))), [x])


def test_matmul_gradients(rng):
    a = rng.uniform(-2, 2, (3, 4))
    b = rng.uniform(-2, 2, (4, 5))
    w = rng.normal(size=(3, 5))
    check_gradients(lambda x, y: ad.reduce_sum(ad.mul(ad.matmul(x, y), ad.Tensor(w))), [a, b])


def test_matmul_stacked_gradients(rng):
    # [t, p] @ [batch, p, c] broadcasting, as used for spline interpolation
    basis = rng.uniform(-1, 1, (6, 4))
    cps = rng.uniform(-2, 2, (3, 4, 5))
    w = rng.normal(size=(3, 6, 5))
    check_gradients(lambda c: ad.reduce_sum(ad.mul(ad.matmul(ad.Tensor(basis), c),
                                                   ad.Tensor(w))), [cps])


def test_broadcast_add_gradients(rng):
    x = rng.uniform(-2, 2, (5, 3))
    b = rng.uniform(-2, 2, (3,))
    w = rng.normal(size=(5, 3))
    check_gradients(lambda t, u: ad.reduce_sum(ad.mul(ad.add(t, u), ad.Tensor(w))), [x, b])


def test_reductions_and_reshape_gradients(rng):
    x = rng.uniform(-2, 2, (4, 3, 2))
    w1 = np.array([1.0, -2.0, 0.5, 3.0])
    w2 = rng.normal(size=(6, 4))
    w3 = rng.normal(size=(3, 2))
    check_gradients(lambda t: ad.reduce_sum(ad.mul(ad.reduce_mean(ad.square(t), axis=(1, 2)),
                                                   ad.Tensor(w1))), [x])
    check_gradients(lambda t: ad.reduce_sum(ad.mul(ad.reshape(t, (6, 4)), ad.Tensor(w2))), [x])
    check_gradients(lambda t: ad.reduce_sum(ad.mul(ad.reduce_sum(t, axis=0),
                                                   ad.Tensor(w3))), [x])


def test_concat_narrow_broadcast_gradients(rng):
    a = rng.uniform(-2, 2, (2, 3))
    b = rng.uniform(-2, 2, (2, 2))
    w = rng.normal(size=(2, 5))
    check_gradients(lambda x, y: ad.reduce_sum(ad.mul(ad.concat([x, y], axis=1),
                                                      ad.Tensor(w))), [a, b])
    w2 = rng.normal(size=(2, 2))
    check_gradients(lambda x: ad.reduce_sum(ad.mul(ad.narrow(x, 1, 1, 2),
                                                   ad.Tensor(w2))), [a])
    w3 = rng.normal(size=(4, 2, 3))
    check_gradients(lambda x: ad.reduce_sum(ad.mul(ad.broadcast_to(x, (4, 2, 3)),
                                                   ad.Tensor(w3))), [a])


def test_wrap_angle_values_and_gradient():
    x = np.array([0.0, np.pi, -np.pi, 1.5 * np.pi, -2.5 * np.pi])
    out = ad.wrap_angle(ad.Tensor(x))
    np.testing.assert_allclose(out.data, [0.0, np.pi, np.pi, -0.5 * np.pi, -0.5 * np.pi])
    _, (g,) = tape_gradients(lambda t: ad.reduce_sum(ad.wrap_angle(t)), [np.array([0.3, 4.0])])
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_narrow_out_of_range_rejected():
    with pytest.raises(ad.ShapeMismatch, match="slice"):
        ad.narrow(ad.Tensor(np.ones((2, 3))), 1, 2, 2)
