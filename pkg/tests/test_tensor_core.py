import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcast import oracles
from gridcast import tensor_core as tc
from gridcast.errors import NumericError, ShapeError
from gridcast.gradcheck import grad_check
from gridcast.tensor_core import Adam, Parameter, SparseMatrix, Tensor


def test_sum_gradient_is_ones():
    p = Parameter("p", np.arange(6.0).reshape(2, 3), dtype=np.float64)
    tc.backward(tc.tsum(p))
    np.testing.assert_array_equal(p.grad, np.ones((2, 3)))


def test_mse_of_self_has_zero_gradient():
    p = Parameter("p", np.random.default_rng(0).standard_normal(5), dtype=np.float64)
    tc.backward(tc.mse(p, p))
    np.testing.assert_array_equal(p.grad, np.zeros(5))


def test_backward_accumulates_without_reset():
    p = Parameter("p", np.ones(3), dtype=np.float64)
    tc.backward(tc.tsum(p))
    tc.backward(tc.tsum(p))
    np.testing.assert_array_equal(p.grad, 2 * np.ones(3))
    p.zero_grad()
    np.testing.assert_array_equal(p.grad, np.zeros(3))


def test_backward_rejects_non_scalar():
    p = Parameter("p", np.ones(3), dtype=np.float64)
    with pytest.raises(ShapeError):
        tc.backward(tc.scale(p, 2.0))


def test_backward_is_deterministic(rng):
    x = rng.standard_normal((2, 3, 6, 6))
    w = rng.standard_normal((4, 3, 3, 3))

    def grads():
        wp = Parameter("w", w, dtype=np.float64)
        loss = tc.mse(tc.relu(tc.conv2d(Tensor(x), wp)), np.zeros((2, 4, 6, 6)))
        tc.backward(loss)
        return wp.grad.copy()

    assert np.array_equal(grads(), grads())


def test_no_grad_records_nothing():
    p = Parameter("p", np.ones(2), dtype=np.float64)
    with tc.no_grad():
        y = tc.scale(p, 3.0)
    assert y._parents == ()


def test_byte_tensors_cannot_take_gradients():
    with pytest.raises(ShapeError):
        Tensor(np.zeros(2, np.uint8), requires_grad=True)


# ---------------------------------------------------------------- conv / pool


def test_conv_identity_kernel_returns_input(rng):
    x = rng.standard_normal((1, 5, 5))
    w = np.zeros((1, 1, 3, 3))
    w[0, 0, 1, 1] = 1.0
    np.testing.assert_array_equal(tc.conv2d(Tensor(x), Tensor(w)).data, x)


def test_conv_matches_loop_oracle_small(rng):
    x = rng.standard_normal((1, 4, 4))
    w = rng.standard_normal((1, 1, 3, 3))
    got = tc.conv2d(Tensor(x), Tensor(w)).data
    assert np.max(np.abs(got - oracles.conv2d_loops(x, w))) < 1e-12


def test_conv_fallback_path_agrees_with_im2col(rng, monkeypatch):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    fast = tc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    monkeypatch.setattr(tc, "_IM2COL_LIMIT", 0)
    slow = tc.conv2d(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.max(np.abs(fast - slow)) < 1e-12
    assert grad_check(lambda xx, ww: tc.conv2d(xx, ww), [x, w], rng) < 1e-4


@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.sampled_from([1, 3]))
@settings(max_examples=25, deadline=None)
def test_conv_matches_oracle_random_shapes(c, h, w, o, k):
    r = np.random.default_rng(c * 100 + h * 10 + w + o * 1000 + k)
    x = r.standard_normal((c, h, w))
    wt = r.standard_normal((o, c, k, k))
    b = r.standard_normal(o)
    got = tc.conv2d(Tensor(x), Tensor(wt), Tensor(b)).data
    assert np.max(np.abs(got - oracles.conv2d_loops(x, wt, b))) < 1e-12


def test_conv_rejects_channel_mismatch(rng):
    with pytest.raises(ShapeError):
        tc.conv2d(Tensor(rng.standard_normal((2, 4, 4))), Tensor(rng.standard_normal((1, 3, 3, 3))))


def test_avg_pool_examples(rng):
    np.testing.assert_array_equal(tc.avg_pool2(Tensor(np.full((2, 4, 6), 3.5))).data, np.full((2, 2, 3), 3.5))
    x = np.array([[[0.0, 0.0], [0.0, 4.0]]])
    assert tc.avg_pool2(Tensor(x)).data[0, 0, 0] == 1.0
    x = rng.standard_normal((3, 6, 8))
    assert np.max(np.abs(tc.avg_pool2(Tensor(x)).data - oracles.avg_pool2_loops(x))) < 1e-12


def test_avg_pool_rejects_odd_dims():
    with pytest.raises(ShapeError):
        tc.avg_pool2(Tensor(np.zeros((1, 3, 4))))


def test_upsample_repeats_pixels():
    x = np.arange(4.0).reshape(1, 2, 2)
    up = tc.upsample_nearest2(Tensor(x)).data
    assert up.shape == (1, 4, 4)
    np.testing.assert_array_equal(up[0, :2, :2], np.zeros((2, 2)))
    np.testing.assert_array_equal(up[0, 2:, 2:], np.full((2, 2), 3.0))


# ---------------------------------------------------------------- sparse


def test_spmm_identity_and_empty_row(rng):
    x = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(tc.spmm(SparseMatrix.identity(4), Tensor(x)).data, x)
    dense = rng.standard_normal((4, 4))
    dense[2] = 0
    out = tc.spmm(SparseMatrix.from_dense(dense), Tensor(x)).data
    np.testing.assert_array_equal(out[2], np.zeros(3))


def test_spmm_matches_dense_product(rng):
    dense = rng.standard_normal((6, 6)) * (rng.random((6, 6)) < 0.5)
    x = rng.standard_normal((6, 4))
    got = tc.spmm(SparseMatrix.from_dense(dense), Tensor(x)).data
    assert np.max(np.abs(got - dense @ x)) < 1e-12


def test_spmm_batched_matches_loop(rng):
    dense = rng.standard_normal((5, 6)) * (rng.random((5, 6)) < 0.5)
    x = rng.standard_normal((3, 6, 2))
    got = tc.spmm(SparseMatrix.from_dense(dense), Tensor(x)).data
    for b in range(3):
        assert np.max(np.abs(got[b] - dense @ x[b])) < 1e-12


def test_spmm_dimension_mismatch():
    with pytest.raises(ShapeError):
        tc.spmm(SparseMatrix.identity(3), Tensor(np.zeros((4, 2))))


def test_sparse_round_trip_and_validation(rng):
    dense = rng.standard_normal((4, 5)) * (rng.random((4, 5)) < 0.5)
    s = SparseMatrix.from_dense(dense)
    np.testing.assert_array_equal(s.to_dense(), dense)
    np.testing.assert_allclose(s.row_sums(), dense.sum(axis=1), atol=1e-12)
    with pytest.raises(ShapeError):
        SparseMatrix(2, 2, np.array([0, 1, 1]), np.array([5]), np.array([1.0]))


# ---------------------------------------------------------------- gradients of plumbing ops


@pytest.mark.parametrize("name,fn,shapes", [
    ("add", tc.add, [(3, 4), (4,)]),
    ("mul", tc.mul, [(2, 3), (2, 3)]),
    ("matmul", tc.matmul, [(3, 4), (4, 2)]),
    ("concat", lambda a, b: tc.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    ("upsample", tc.upsample_nearest2, [(2, 2, 3)]),
    ("pool", tc.avg_pool2, [(2, 4, 4)]),
    ("square", tc.square, [(5,)]),
])
def test_plumbing_gradients(name, fn, shapes, rng):
    arrays = [rng.standard_normal(s) for s in shapes]
    assert grad_check(fn, arrays, rng) < 1e-4, name


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_leaves_params():
    p = Parameter("p", np.array([1.0, -2.0]), dtype=np.float64)
    opt = Adam([p], lr=1e-3)
    opt.step()
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_lr_times_sign():
    p = Parameter("p", np.zeros(3), dtype=np.float64)
    p.grad = np.array([0.5, -3.0, 2e-3])
    opt = Adam([p], lr=1e-3, eps=1e-8)
    opt.step()
    np.testing.assert_allclose(p.data, -1e-3 * np.sign([0.5, -3.0, 2e-3]), rtol=1e-4)


def test_adam_decreases_quadratic():
    p = Parameter("p", np.array([3.0, -1.0]), dtype=np.float64)
    opt = Adam([p], lr=1e-3)
    losses = []
    for _ in range(3):
        opt.zero_grad()
        loss = tc.tsum(tc.square(p))
        losses.append(loss.item())
        tc.backward(loss)
        opt.step()
    assert losses[2] < losses[1] < losses[0]


def test_adam_aborts_on_non_finite_gradient():
    p = Parameter("p", np.ones(2), dtype=np.float64)
    p.grad = np.array([np.nan, 1.0])
    opt = Adam([p])
    with pytest.raises(NumericError):
        opt.step()
    np.testing.assert_array_equal(p.data, [1.0, 1.0])
