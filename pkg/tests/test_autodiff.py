import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from mubc import autodiff as ad
from mubc.autodiff import ShapeError, Tape, Tensor, backward, gradient_check


def _loss_sum_sq(tape, y):
    """Scalar sum of squares over any-rank tensor (helper for checks)."""
    s = ad.mul(tape, y, y)
    while s.data.ndim > 0:
        s = ad.reduce_sum(tape, s, axis=s.data.ndim - 1)
    return s


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal(9), trainable=True)
    tape = Tape()
    loss = ad.reduce_sum(tape, x, axis=0)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones(9))


def test_backward_half_quadratic_gives_x(rng):
    x = Tensor(rng.standard_normal(6), trainable=True)
    tape = Tape()
    loss = ad.scale(tape, ad.reduce_sum(tape, ad.mul(tape, x, x), axis=0), 0.5)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, x.data)


def test_backward_rejects_nonscalar(rng):
    x = Tensor(rng.standard_normal(3))
    tape = Tape()
    y = ad.mul(tape, x, x)
    with pytest.raises(ShapeError):
        backward(tape, y)


def test_matmul_identity_passthrough(rng):
    x = rng.standard_normal((4, 4))
    eye = Tensor(np.eye(4))
    xt = Tensor(x, trainable=True)
    tape = Tape()
    out = ad.matmul(tape, eye, xt)
    np.testing.assert_array_equal(out.data, x)
    backward_seed = rng.standard_normal((4, 4))
    out.grad = backward_seed
    for rec in reversed(tape.records):
        rec.fn()
    np.testing.assert_allclose(xt.grad, backward_seed, atol=0, rtol=0)


def test_concat_slice_roundtrip_and_adjoints(rng):
    a = Tensor(rng.standard_normal((3, 2, 2)), trainable=True)
    b = Tensor(rng.standard_normal((3, 2, 3)), trainable=True)
    tape = Tape()
    cat = ad.concat_features(tape, a, b)
    back_a = ad.slice_features(tape, cat, 0, 2)
    back_b = ad.slice_features(tape, cat, 2, 5)
    np.testing.assert_array_equal(back_a.data, a.data)
    np.testing.assert_array_equal(back_b.data, b.data)
    loss = _loss_sum_sq(tape, back_a)
    backward(tape, loss)
    np.testing.assert_allclose(a.grad, 2 * a.data)
    assert b.grad is None or np.all(b.grad == 0)


def test_sparse_matmul_matches_dense_oracle(rng):
    dense = rng.standard_normal((20, 20)) * (rng.random((20, 20)) < 0.3)
    smat = sp.csr_matrix(dense)
    x = Tensor(rng.standard_normal((20, 6)))
    tape = Tape()
    out = ad.sparse_matmul(tape, smat, x)
    assert np.abs(out.data - dense @ x.data).max() <= 1e-13


def test_sparse_matmul_adjoint_is_transpose(rng):
    dense = rng.standard_normal((5, 7))
    smat = sp.csr_matrix(dense)
    x = Tensor(rng.standard_normal((7, 3)), trainable=True)
    tape = Tape()
    out = ad.sparse_matmul(tape, smat, x)
    seed = rng.standard_normal(out.data.shape)
    out.grad = seed
    for rec in reversed(tape.records):
        rec.fn()
    np.testing.assert_allclose(x.grad, dense.T @ seed, atol=1e-14)


def test_three_layer_composite_gradient_check(rng):
    smat = sp.csr_matrix(np.abs(rng.standard_normal((6, 6))) * (rng.random((6, 6)) < 0.5))
    x_fixed = rng.standard_normal((6, 3, 2))

    def fn(vec):
        w1 = Tensor(vec[:24].reshape(6, 2, 2), trainable=True)
        b1 = Tensor(vec[24:36].reshape(6, 1, 2), trainable=True)
        w2 = Tensor(vec[36:].reshape(6, 2, 2), trainable=True)
        tape = Tape()
        h = ad.tanh(tape, ad.add_bias(tape, ad.matmul(tape, Tensor(x_fixed), w1), b1))
        h = ad.sparse_matmul(tape, smat, h)
        h = ad.tanh(tape, ad.matmul(tape, h, w2))
        loss = _loss_sum_sq(tape, h)
        backward(tape, loss)
        return float(loss.data), np.concatenate([w1.grad.ravel(), b1.grad.ravel(),
                                                 w2.grad.ravel()])

    err = gradient_check(fn, rng.standard_normal(60) * 0.4, 1e-5)
    assert err <= 1e-6


def test_gradient_check_quadratic_tight(rng):
    q = rng.standard_normal((5, 5))
    q = q @ q.T + np.eye(5)

    def fn(vec):
        return 0.5 * float(vec @ q @ vec), q @ vec

    assert gradient_check(fn, rng.standard_normal(5), 1e-5) <= 1e-9


def test_gradient_check_rejects_bad_epsilon(rng):
    fn = lambda v: (float(v @ v), 2 * v)
    with pytest.raises(ValueError):
        gradient_check(fn, np.ones(3), 0.0)
    with pytest.raises(ValueError):
        gradient_check(fn, np.ones(3), 1e-2)


def test_accumulation_over_multiple_uses(rng):
    x = Tensor(rng.standard_normal(4), trainable=True)
    tape = Tape()
    y = ad.add(tape, x, x)
    loss = ad.reduce_sum(tape, y, axis=0)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, 2 * np.ones(4))


def test_backward_visits_each_record_once(rng):
    x = Tensor(rng.standard_normal((3, 4)), trainable=True)
    tape = Tape()
    h = ad.tanh(tape, x)
    h = ad.mul(tape, h, h)
    loss = ad.reduce_mean(tape, ad.reduce_sum(tape, h, axis=1), axis=0)
    backward(tape, loss)
    assert all(rec.visits == 1 for rec in tape.records)
    assert len(tape.records) == 4


def test_forward_determinism_bitwise(rng):
    x = rng.standard_normal((5, 4, 3))
    w = rng.standard_normal((5, 3, 2))

    def run():
        tape = Tape()
        out = ad.tanh(tape, ad.matmul(tape, Tensor(x), Tensor(w)))
        return out.data.tobytes()

    assert run() == run()


def test_shape_error_reports_shapes(rng):
    a, b = Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5)))
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        ad.matmul(Tape(), a, b)


@given(st.integers(2, 9), st.integers(1, 4), st.integers(1, 4))
def test_conv_full_matches_double_loop(v, ci, co):
    rng = np.random.default_rng(v * 100 + ci * 10 + co)
    x = rng.standard_normal((2, v, ci))
    k = rng.standard_normal((v, ci, co))
    tape = Tape()
    out = ad.conv1d_full(tape, Tensor(x), Tensor(k))
    pad_left = (v - 1) // 2
    ref = np.zeros((2, v, co))
    for b in range(2):
        for i in range(v):
            for t in range(v):
                j = i + t - pad_left
                if 0 <= j < v:
                    ref[b, i] += x[b, j] @ k[t]
    assert np.abs(out.data - ref).max() <= 1e-13


def test_batchnorm_norm_zero_mean_unit_var(rng):
    x = Tensor(rng.standard_normal((7, 5, 3)) * 3 + 1)
    xhat, mean, var = ad.batchnorm_norm(Tape(), x, 1e-12)
    flat = xhat.data.reshape(-1, 3)
    assert np.abs(flat.mean(axis=0)).max() <= 1e-12
    assert np.abs(flat.var(axis=0) - 1).max() <= 1e-10


def test_reduce_mean_is_batch_mean(rng):
    x = Tensor(rng.standard_normal((6, 4)))
    out = ad.reduce_mean(Tape(), x, axis=0)
    np.testing.assert_allclose(out.data, x.data.mean(axis=0), atol=1e-15)
