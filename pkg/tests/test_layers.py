"""Unit tests for linear/GRU/embedding layers, Adam, clipping and dropout."""

import math

import numpy as np
import pytest

import newentry.autodiff as ad
import newentry.layers as ly
from newentry.autodiff import Tape, Tensor, backward, finite_diff_check
from newentry.rng import Streams, stream


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def test_linear_init_bounds_and_zero_bias(rng):
    p = ly.init_linear(30, 50, rng)
    s = math.sqrt(6.0 / 80.0)
    assert np.abs(p.weight.data).max() <= s
    assert np.abs(p.weight.data).max() > 0.5 * s  # actually fills the range
    np.testing.assert_array_equal(p.bias.data, np.zeros(30))


def test_gru_zero_params_halves_previous_state():
    hidden, inp = 4, 3
    zeros = {f: Tensor(np.zeros((hidden, hidden if f.startswith("u") else inp)
                                if not f.startswith("b") else hidden), requires_grad=True)
             for f in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")}
    p = ly.GruParams(**zeros)
    x = Tensor(np.ones((2, inp)))
    h_prev = Tensor(np.array([[1.0, 2.0, -1.0, 0.5], [0.0, 4.0, 4.0, 4.0]]))
    h = ly.gru_cell_step(x, h_prev, p)
    np.testing.assert_allclose(h.data, 0.5 * h_prev.data, rtol=1e-6)


def test_gru_step_matches_finite_differences(rng):
    with ad.precision(64):
        p = ly.init_gru(5, 3, rng)
        x = Tensor(rng.normal(size=(2, 3)), dtype=np.float64)
        h0 = Tensor(rng.normal(size=(2, 5)), dtype=np.float64)
        params = ly.gru_params_dict(p, "gru")

        def fn():
            h = ly.gru_cell_step(x, h0, p)
            h = ly.gru_cell_step(x, h, p)
            return ad.reduce_sum(ad.mul(h, h))

        report = finite_diff_check(fn, params, epsilon=1e-5)
    assert report.passed, report.summary()
    assert report.max_rel_err <= 1e-4


def test_bigru_zero_params_final_is_half_init(rng):
    hidden, inp = 3, 2
    mk = lambda shape: Tensor(np.zeros(shape), requires_grad=True)
    p = ly.GruParams(w_z=mk((hidden, inp)), u_z=mk((hidden, hidden)), b_z=mk(hidden),
                     w_r=mk((hidden, inp)), u_r=mk((hidden, hidden)), b_r=mk(hidden),
                     w_h=mk((hidden, inp)), u_h=mk((hidden, hidden)), b_h=mk(hidden))
    v = np.array([[0.4, -0.8, 1.2]])
    seq = Tensor(np.ones((1, inp)))  # length-1 sequence: one step per direction
    hiddens, final = ly.bigru_encode(seq, Tensor(v), Tensor(v), p, p)
    np.testing.assert_allclose(final.data, np.concatenate([0.5 * v, 0.5 * v], axis=1),
                               rtol=1e-6)
    assert hiddens.shape == (1, 2 * hidden)


def test_bigru_final_matches_per_position_states(rng):
    with ad.precision(64):
        fwd = ly.init_gru(4, 3, rng)
        bwd = ly.init_gru(4, 3, rng)
        seq = Tensor(rng.normal(size=(5, 3)), dtype=np.float64)
        init = Tensor(np.zeros((1, 4)), dtype=np.float64)
        hiddens, final = ly.bigru_encode(seq, init, init, fwd, bwd)
    assert hiddens.shape == (5, 8)
    # forward last hidden and backward first hidden
    np.testing.assert_allclose(final.data[0, :4], hiddens.data[-1, :4])
    np.testing.assert_allclose(final.data[0, 4:], hiddens.data[0, 4:])


def test_bigru_gradients_flow_to_inits(rng):
    with ad.precision(64):
        fwd = ly.init_gru(3, 2, rng)
        bwd = ly.init_gru(3, 2, rng)
        seq = Tensor(rng.normal(size=(4, 2)), dtype=np.float64)
        init_f = Tensor(rng.normal(size=(1, 3)), requires_grad=True, name="init_f")
        init_b = Tensor(rng.normal(size=(1, 3)), requires_grad=True, name="init_b")

        def fn():
            _, final = ly.bigru_encode(seq, init_f, init_b, fwd, bwd)
            return ad.reduce_sum(ad.mul(final, final))

        report = finite_diff_check(fn, {"init_f": init_f, "init_b": init_b}, epsilon=1e-5)
    assert report.passed, report.summary()


def test_masked_gru_step_keeps_state_for_masked_rows(rng):
    p = ly.init_gru(3, 2, rng)
    x = Tensor(rng.normal(size=(2, 2)).astype(np.float32))
    h = Tensor(rng.normal(size=(2, 3)).astype(np.float32))
    mask = Tensor(np.array([[1.0, 1.0, 1.0], [0.0, 0.0, 0.0]], dtype=np.float32))
    out = ly.masked_gru_step(x, h, p, mask)
    np.testing.assert_array_equal(out.data[1], h.data[1])
    assert not np.allclose(out.data[0], h.data[0])


def test_adam_first_step_size_is_learning_rate(rng):
    x = Tensor(np.array([10.0]), requires_grad=True)
    opt = ly.Adam({"x": x}, lr=0.05)
    opt.step({"x": np.array([123.4])})
    # bias-corrected first step is lr * g / (|g| + eps) which is almost lr
    np.testing.assert_allclose(x.data, [10.0 - 0.05], atol=1e-6)


def test_adam_zero_gradient_leaves_parameters_unchanged():
    x = Tensor(np.array([1.5, -2.0]), requires_grad=True)
    opt = ly.Adam({"x": x}, lr=0.1)
    for _ in range(3):
        opt.step({"x": np.zeros(2)})
    np.testing.assert_array_equal(x.data, np.array([1.5, -2.0], dtype=np.float32))


def test_adam_converges_on_scalar_quadratic():
    x = Tensor(np.array([0.0]), requires_grad=True, dtype=np.float64)
    opt = ly.Adam({"x": x}, lr=0.05)
    for _ in range(500):
        grad = 2.0 * (x.data - 3.0)
        opt.step({"x": grad})
    assert abs(x.data[0] - 3.0) < 1e-2


def test_adam_rejects_nonfinite_gradient_with_param_name():
    x = Tensor(np.zeros(2), requires_grad=True)
    opt = ly.Adam({"theta": x})
    with pytest.raises(ly.OptimError, match="theta"):
        opt.step({"theta": np.array([1.0, np.nan])})


def test_adam_validates_hyperparameters():
    x = Tensor(np.zeros(1), requires_grad=True)
    with pytest.raises(ValueError):
        ly.Adam({"x": x}, lr=-1.0)
    with pytest.raises(ValueError):
        ly.Adam({"x": x}, beta1=1.0)
    with pytest.raises(ValueError):
        ly.Adam({"x": x}, eps=0.0)


def test_adam_state_roundtrip_is_exact(rng):
    x = Tensor(rng.normal(size=4), requires_grad=True)
    opt = ly.Adam({"x": x}, lr=0.01)
    opt.step({"x": rng.normal(size=4)})
    snap = opt.state_dict()
    y = Tensor(x.data.copy(), requires_grad=True)
    opt2 = ly.Adam({"x": y}, lr=0.01)
    opt2.load_state_dict(snap)
    g = rng.normal(size=4)
    opt.step({"x": g.copy()})
    opt2.step({"x": g.copy()})
    np.testing.assert_array_equal(x.data, y.data)


def test_clip_global_norm_scales_only_when_needed():
    g1 = {"a": np.array([3.0, 4.0])}  # norm 5 exactly: untouched
    norm = ly.clip_global_norm(g1, 5.0)
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose(g1["a"], [3.0, 4.0])

    g2 = {"a": np.array([30.0, 40.0]), "b": np.zeros(3)}
    norm = ly.clip_global_norm(g2, 5.0)
    assert norm == pytest.approx(50.0)
    np.testing.assert_allclose(g2["a"], [3.0, 4.0])
    assert ly.global_grad_norm(g2) == pytest.approx(5.0)


def test_dropout_identity_when_not_training():
    x = Tensor(np.ones((4, 4)))
    assert ly.dropout(x, 0.2, training=False) is x
    assert ly.dropout(x, 0.0, training=True) is x


def test_dropout_masks_and_rescales():
    gen = stream(9, "dropout")
    x = Tensor(np.ones((200, 50)))
    y = ly.dropout(x, 0.2, training=True, rng=gen)
    vals = np.unique(y.data)
    np.testing.assert_allclose(sorted(vals), [0.0, 1.0 / 0.8], rtol=1e-6)
    drop_rate = (y.data == 0).mean()
    assert abs(drop_rate - 0.2) < 0.02
    assert abs(y.data.mean() - 1.0) < 0.02  # inverted scaling preserves expectation


def test_embedding_pad_row_zero_and_grad_suppressed(rng):
    emb = ly.init_embedding(10, 4, rng, pad_index=0)
    np.testing.assert_array_equal(emb.table.data[0], np.zeros(4))
    with Tape() as tape:
        rows = emb.lookup(np.array([0, 3, 0]))
        loss = ad.reduce_sum(rows)
    grads = backward(tape, loss)
    emb.zero_pad_grad(grads)
    np.testing.assert_array_equal(grads[emb.table][0], np.zeros(4))
    assert grads[emb.table][3].sum() == pytest.approx(4.0)


def test_load_text_embeddings(tmp_path, rng):
    emb = ly.init_embedding(5, 3, rng)
    vocab = {"<pad>": 0, "cat": 2, "dog": 3}
    path = tmp_path / "vec.txt"
    path.write_text("cat 1.0 2.0 3.0\nbird 9 9 9\ndog -1 -2 -3\n")
    n = ly.load_text_embeddings(emb, str(path), vocab)
    assert n == 2
    np.testing.assert_allclose(emb.table.data[2], [1.0, 2.0, 3.0])
    np.testing.assert_allclose(emb.table.data[3], [-1.0, -2.0, -3.0])

    bad = tmp_path / "bad.txt"
    bad.write_text("cat 1.0 2.0\n")
    with pytest.raises(ValueError, match="expected 3 values"):
        ly.load_text_embeddings(emb, str(bad), vocab)


def test_streams_are_independent_and_reproducible():
    a1 = Streams(7)
    a2 = Streams(7)
    b = Streams(8)
    x1 = a1["init"].normal(size=5)
    x2 = a2["init"].normal(size=5)
    np.testing.assert_array_equal(x1, x2)
    assert not np.array_equal(x1, b["init"].normal(size=5))
    # consuming one stream does not perturb another
    a1["dropout"].random(1000)
    np.testing.assert_array_equal(a1["sampling"].normal(size=3),
                                  a2["sampling"].normal(size=3))


def test_streams_state_roundtrip():
    s = Streams(3)
    s["shuffle"].random(17)
    snap = s.state_dict()
    expected = s["shuffle"].random(5)
    s2 = Streams(3)
    s2.load_state_dict(snap)
    np.testing.assert_array_equal(s2["shuffle"].random(5), expected)
