"""Unit tests for the reverse-mode autodiff engine."""

import numpy as np
import pytest

import newentry.autodiff as ad
from newentry.autodiff import Tape, Tensor, backward, finite_diff_check


def param(values, name=None):
    return Tensor(np.asarray(values, dtype=np.float64), requires_grad=True,
                  dtype=np.float64, name=name)


def test_sum_of_squares_gradient():
    x = param([1.0, 2.0])
    with Tape() as tape:
        loss = ad.reduce_sum(ad.mul(x, x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [2.0, 4.0])
    assert loss.item() == 5.0


def test_softmax_anchor_values():
    np.testing.assert_allclose(ad.softmax(param([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ad.softmax(param([0.0, np.log(3.0)])).data, [0.25, 0.75])


def test_softmax_shift_invariance_and_large_inputs():
    a = ad.softmax(param([1000.0, 1000.0])).data
    np.testing.assert_allclose(a, [0.5, 0.5])
    b = ad.softmax(param([12.3, -4.5, 0.1])).data
    c = ad.softmax(param([12.3 + 100, -4.5 + 100, 0.1 + 100])).data
    np.testing.assert_allclose(b, c, rtol=1e-12)
    assert abs(b.sum() - 1.0) < 1e-12


def test_softmax_rows_sum_to_one_property():
    rng = np.random.default_rng(42)
    for _ in range(20):
        m = param(rng.normal(size=(5, 7)) * rng.uniform(0.1, 50))
        y = ad.softmax(m).data
        np.testing.assert_allclose(y.sum(axis=1), np.ones(5), atol=1e-12)
        assert (y >= 0).all()


def test_sigmoid_derivative_at_zero():
    x = param([0.0])
    with Tape() as tape:
        loss = ad.reduce_sum(ad.sigmoid(x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [0.25])


def test_relu_subgradient_at_zero_is_zero():
    x = param([-1.0, 0.0, 2.0])
    with Tape() as tape:
        loss = ad.reduce_sum(ad.relu(x))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [0.0, 0.0, 1.0])


def test_matmul_shape_mismatch_names_op_and_shapes():
    a = param(np.zeros((2, 3)))
    b = param(np.zeros((4, 2)))
    with pytest.raises(ad.ShapeError, match=r"matmul.*\(2, 3\).*\(4, 2\)"):
        ad.matmul(a, b)


def test_elementwise_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError, match="mul"):
        ad.mul(param(np.zeros((2, 3))), param(np.zeros((3, 2))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(param(np.zeros((2, 3))), param(np.zeros((2, 2))))


def test_bias_over_rows_is_the_only_add_broadcast():
    x = param(np.ones((3, 4)))
    b = param(np.arange(4.0))
    with Tape() as tape:
        out = ad.add(x, b)
        loss = ad.reduce_sum(out)
    np.testing.assert_allclose(out.data, 1.0 + np.arange(4.0)[None, :].repeat(3, axis=0))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[b], [3.0, 3.0, 3.0, 3.0])
    # column vector over columns stays rejected
    with pytest.raises(ad.ShapeError):
        ad.add(x, param(np.ones(3)))


def test_backward_requires_scalar_on_tape_loss():
    x = param([1.0, 2.0])
    with Tape() as tape:
        y = ad.mul(x, x)
    with pytest.raises(ad.TapeError, match="scalar"):
        backward(tape, y)
    off_tape = ad.reduce_sum(ad.mul(x, x))  # built with no active tape
    with pytest.raises(ad.TapeError, match="not produced"):
        backward(tape, off_tape)


def test_backward_of_sum_equals_sum_of_backwards():
    rng = np.random.default_rng(7)
    x = param(rng.normal(size=(4, 3)))
    w = param(rng.normal(size=(2, 3)))

    def loss_a():
        return ad.reduce_sum(ad.relu(ad.linear(x, w)))

    def loss_b():
        return ad.reduce_mean(ad.mul(x, x))

    with Tape() as t1:
        g1 = backward(t1, loss_a())
    with Tape() as t2:
        g2 = backward(t2, loss_b())
    with Tape() as t3:
        g3 = backward(t3, ad.add(loss_a(), loss_b()))
    np.testing.assert_allclose(g3[x], g1[x] + g2[x], rtol=1e-12)
    np.testing.assert_allclose(g3[w], g1[w], rtol=1e-12)


def test_each_node_visited_once_fanout_accumulates():
    # y = x used twice: d/dx (x*x + x*x) = 4x
    x = param([3.0])
    with Tape() as tape:
        y = ad.mul(x, x)
        loss = ad.reduce_sum(ad.add(y, y))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [12.0])


def test_two_layer_perceptron_matches_finite_differences():
    rng = np.random.default_rng(0)
    w1 = param(rng.normal(size=(5, 4)) * 0.7, "w1")
    b1 = param(rng.normal(size=5) * 0.3, "b1")
    w2 = param(rng.normal(size=(1, 5)) * 0.7, "w2")
    x = Tensor(rng.normal(size=(3, 4)), dtype=np.float64)

    def fn():
        h = ad.relu(ad.linear(x, w1, b1))
        return ad.reduce_sum(ad.sigmoid(ad.linear(h, w2)))

    report = finite_diff_check(fn, {"w1": w1, "b1": b1, "w2": w2}, epsilon=1e-5)
    assert report.passed, report.summary()
    assert report.max_rel_err <= 1e-4


def test_finite_diff_flags_relu_kink_as_nondifferentiable():
    x = param([0.0, 1.0], "x")
    report = finite_diff_check(lambda: ad.reduce_sum(ad.relu(x)), {"x": x}, epsilon=1e-5)
    assert ("x", 0) in report.nondifferentiable
    assert report.passed  # kink coordinate excluded, the rest agrees


def test_finite_diff_records_nonfinite_as_failure():
    x = param([1e-9], "x")  # log crosses into negative territory under -eps
    report = finite_diff_check(lambda: ad.reduce_sum(ad.log(x)), {"x": x}, epsilon=1e-5)
    assert not report.passed
    assert any("non-finite" in f for f in report.failures)


def test_log_softmax_consistent_with_softmax():
    rng = np.random.default_rng(3)
    x = param(rng.normal(size=(4, 6)) * 5)
    np.testing.assert_allclose(ad.log_softmax(x).data, np.log(ad.softmax(x).data),
                               rtol=1e-10, atol=1e-12)

    def fn():
        return ad.reduce_sum(ad.mul(ad.log_softmax(x), x))

    report = finite_diff_check(fn, {"x": x}, epsilon=1e-6)
    assert report.passed, report.summary()


def test_embedding_lookup_and_scatter_add_gradient():
    table = param(np.arange(12.0).reshape(4, 3), "emb")
    idx = np.array([1, 1, 3])
    with Tape() as tape:
        rows = ad.embedding(table, idx)
        loss = ad.reduce_sum(rows)
    np.testing.assert_allclose(rows.data, table.data[idx])
    grads = backward(tape, loss)
    expected = np.zeros((4, 3))
    expected[1] = 2.0  # looked up twice, gradients accumulate
    expected[3] = 1.0
    np.testing.assert_allclose(grads[table], expected)


def test_embedding_index_out_of_range():
    table = param(np.zeros((4, 3)))
    with pytest.raises(ad.ShapeError, match="embedding"):
        ad.embedding(table, np.array([4]))


def test_concat_narrow_reshape_gradients():
    a = param(np.ones((2, 2)), "a")
    b = param(np.full((2, 3), 2.0), "b")

    def fn():
        joined = ad.concat([a, b], axis=1)
        left = ad.narrow(joined, 1, 1, 3)
        return ad.reduce_sum(ad.mul(ad.reshape(left, (3, 2)), ad.reshape(left, (3, 2))))

    report = finite_diff_check(fn, {"a": a, "b": b}, epsilon=1e-6)
    assert report.passed, report.summary()


def test_col_scatter_places_and_gathers():
    x = param(np.array([[1.0, 2.0], [3.0, 4.0]]), "x")
    cols = np.array([3, 0])
    with Tape() as tape:
        wide = ad.col_scatter(x, cols, 5)
        loss = ad.reduce_sum(ad.mul(wide, wide))
    np.testing.assert_allclose(wide.data, [[2, 0, 0, 1, 0], [4, 0, 0, 3, 0]])
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], 2 * x.data)


def test_clip_gradient_is_zero_outside_range():
    x = param([-2.0, 0.5, 3.0])
    with Tape() as tape:
        loss = ad.reduce_sum(ad.clip(x, 0.0, 1.0))
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[x], [0.0, 1.0, 0.0])


def test_precision_context_controls_default_dtype():
    assert Tensor(np.zeros(2)).dtype == np.float32 or Tensor([0.0]).dtype == np.float32
    with ad.precision(64):
        assert Tensor([0.0]).dtype == np.float64
    assert Tensor([0.0]).dtype == np.float32
    with pytest.raises(ValueError):
        with ad.precision(16):
            pass


def test_mixed_dtype_rejected():
    a = Tensor(np.zeros(3), dtype=np.float32)
    b = Tensor(np.zeros(3), dtype=np.float64)
    with pytest.raises(ad.ShapeError, match="dtype"):
        ad.add(a, b)


def test_forward_is_bitwise_deterministic():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(8, 8)), dtype=np.float64)
    w = Tensor(rng.normal(size=(8, 8)), dtype=np.float64)
    one = ad.tanh(ad.matmul(x, w)).data
    two = ad.tanh(ad.matmul(x, w)).data
    assert np.array_equal(one, two)


def test_reductions_and_exp_log_gradcheck():
    rng = np.random.default_rng(5)
    x = param(rng.uniform(0.5, 2.0, size=(3, 4)), "x")

    def fn():
        s = ad.reduce_sum(ad.exp(x), axis=0)
        m = ad.reduce_mean(ad.log(x), axis=1)
        return ad.add(ad.reduce_sum(s), ad.reduce_sum(m))

    report = finite_diff_check(fn, {"x": x}, epsilon=1e-6)
    assert report.passed, report.summary()
