"""Autodiff engine: forward values, backward oracles, gradient checks."""

import numpy as np
import pytest

from dmm import tensor as T
from dmm.tensor import (
    GraphError,
    NumericError,
    ShapeError,
    Tensor,
    backward,
    batch_stats,
    checked_mode,
    conv2d,
    cross_entropy,
    forward_op,
    grad_check,
    matmul,
    normalize_affine,
    relu,
    softmax,
)


class TestForward:
    def test_matmul_identity(self):
        out = matmul(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [4.0]])

    def test_relu_definition(self):
        out = relu(Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_batch_stats_hand_case(self):
        # batch [[1],[3]], one channel: mean 2, biased var ((1-2)^2+(3-2)^2)/2 = 1
        m, v = batch_stats(Tensor([[1.0], [3.0]]))
        np.testing.assert_allclose(m.data, [2.0])
        np.testing.assert_allclose(v.data, [1.0])

    def test_batch_stats_spatial(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 3, 5, 5)).astype(np.float32)
        m, v = batch_stats(Tensor(x))
        np.testing.assert_allclose(m.data, x.mean(axis=(0, 2, 3)), rtol=1e-5)
        np.testing.assert_allclose(v.data, x.var(axis=(0, 2, 3)), rtol=1e-4)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        s = softmax(Tensor(rng.standard_normal((6, 4))))
        np.testing.assert_allclose(s.data.sum(axis=-1), np.ones(6), rtol=1e-6)

    def test_conv2d_matches_direct_loops(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((2, 3, 6, 6))
        w = rng.standard_normal((4, 3, 3, 3))
        out = conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64), padding=1)
        ref = np.zeros((2, 4, 6, 6))
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        for n in range(2):
            for o in range(4):
                for i in range(6):
                    for j in range(6):
                        ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * w[o]).sum()
        np.testing.assert_allclose(out.data, ref, rtol=1e-10)

    def test_avgpool_hand_case(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        out = T.avgpool2d(x, 2)
        np.testing.assert_allclose(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_determinism(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((8, 5)).astype(np.float32)
        w = rng.standard_normal((5, 3)).astype(np.float32)
        a = matmul(Tensor(x), Tensor(w)).data
        b = matmul(Tensor(x), Tensor(w)).data
        assert (a == b).all()

    def test_forward_op_dispatch(self):
        out = forward_op("relu", [Tensor([-2.0, 5.0])])
        np.testing.assert_array_equal(out.data, [0.0, 5.0])
        m, v = forward_op("batch_stats", [Tensor([[1.0], [3.0]])])
        np.testing.assert_allclose(m.data, [2.0])
        np.testing.assert_allclose(v.data, [1.0])
        with pytest.raises(KeyError):
            forward_op("fft", [Tensor([1.0])])


class TestForwardErrors:
    def test_matmul_shape_error_names_op_and_dims(self):
        with pytest.raises(ShapeError, match="matmul.*3.*4"):
            matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))

    def test_conv_channel_mismatch(self):
        with pytest.raises(ShapeError, match="conv2d"):
            conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))

    def test_checked_mode_raises_on_nonfinite(self):
        with checked_mode(True):
            with pytest.raises(NumericError, match="log"):
                T.log(Tensor([0.0]))

    def test_unchecked_mode_allows_nonfinite(self):
        with checked_mode(False):
            out = T.log(Tensor([0.0]))
            assert np.isneginf(out.data).all()

    def test_broadcast_rejects_arbitrary_shapes(self):
        with pytest.raises(ShapeError, match="add"):
            T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        backward(T.tsum(x))
        np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])

    def test_sum_of_squares_gradient(self):
        x = Tensor([2.0, -3.0], requires_grad=True)
        backward(T.tsum(T.square(x)))
        np.testing.assert_allclose(x.grad, [4.0, -6.0])

    def test_batch_stats_variance_grad_matches_finite_differences(self):
        # 64-bit: gradient of mean(var of x) against central differences
        x0 = np.array([[1.0], [3.0]])

        def loss_value(arr):
            _, v = batch_stats(Tensor(arr, dtype=np.float64))
            return T.tmean(v).item()

        x = Tensor(x0, requires_grad=True, dtype=np.float64)
        _, v = batch_stats(x)
        backward(T.tmean(v))
        eps = 1e-6
        for i in range(2):
            hi, lo = x0.copy(), x0.copy()
            hi[i, 0] += eps
            lo[i, 0] -= eps
            cd = (loss_value(hi) - loss_value(lo)) / (2 * eps)
            an = x.grad[i, 0]
            assert abs(an - cd) / (abs(an) + abs(cd) + 1e-12) < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            backward(T.square(x))

    def test_detached_loss_rejected(self):
        x = Tensor([1.0, 2.0])
        with pytest.raises(GraphError, match="detached"):
            backward(T.tsum(x))

    def test_double_backward_is_idempotent(self):
        x = Tensor([1.0, 4.0], requires_grad=True)
        loss = T.tsum(T.square(x))
        backward(loss)
        first = x.grad.copy()
        backward(loss)
        np.testing.assert_array_equal(x.grad, first)

    def test_explicit_accumulation_across_graphs(self):
        x = Tensor([2.0], requires_grad=True)
        backward(T.tsum(T.square(x)))
        backward(T.tsum(T.square(x)), accumulate=True)
        np.testing.assert_allclose(x.grad, [8.0])

    def test_nonparticipating_leaf_gets_zero(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        grads = backward(T.tsum(x), leaves=[x, unused])
        np.testing.assert_array_equal(grads[unused], [0.0])
        np.testing.assert_array_equal(grads[x], [1.0])

    def test_grad_map_keys_are_leaves(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        w = Tensor([3.0, 4.0], requires_grad=True)
        grads = backward(T.tsum(T.mul(x, w)))
        assert set(grads) == {x, w}
        np.testing.assert_allclose(grads[x], [3.0, 4.0])


# every differentiable op, checked at <= 1e-4 relative error in 64-bit mode
GRAD_CASES = [
    ("matmul_3x4_4x2", lambda a, b: matmul(a, b), [(3, 4), (4, 2)], ()),
    ("conv2d_5x5_k3", lambda x, w: conv2d(x, w, padding=1), [(1, 1, 5, 5), (1, 1, 3, 3)], ()),
    ("conv2d_multichannel", lambda x, w: conv2d(x, w, padding=0), [(2, 3, 5, 5), (2, 3, 3, 3)], ()),
    ("add_broadcast_channel", lambda x, b: T.add(x, b), [(4, 3), (3,)], ()),
    ("mul_broadcast_channel_4d", lambda x, b: T.mul(x, b), [(2, 3, 4, 4), (3,)], ()),
    ("sub", lambda a, b: T.sub(a, b), [(3, 3), (3, 3)], ()),
    ("div", lambda a, b: T.div(a, b), [(3, 3), (3, 3)], (1,)),
    ("relu", lambda x: relu(x), [(4, 5)], ()),
    ("batch_stats_2d", lambda x: batch_stats(x), [(6, 3)], ()),
    ("batch_stats_4d", lambda x: batch_stats(x), [(3, 2, 4, 4)], ()),
    (
        "normalize_affine_trainable",
        lambda x, g, b: normalize_affine(x, *batch_stats(x), g, b),
        [(6, 3), (3,), (3,)],
        (),
    ),
    ("avgpool2d", lambda x: T.avgpool2d(x, 2), [(2, 2, 4, 4)], ()),
    ("flatten", lambda x: T.flatten(x), [(2, 3, 2, 2)], ()),
    ("softmax", lambda x: softmax(x), [(4, 5)], ()),
    ("log_softmax", lambda x: T.log_softmax(x), [(4, 5)], ()),
    ("log", lambda x: T.log(x), [(3, 3)], (0,)),
    ("exp", lambda x: T.exp(x), [(3, 3)], ()),
    ("sum", lambda x: T.tsum(x), [(3, 4)], ()),
    ("mean", lambda x: T.tmean(x), [(3, 4)], ()),
    ("square", lambda x: T.square(x), [(3, 3)], ()),
    ("sqrt_eps", lambda x: T.sqrt(x, eps=1e-5), [(3, 3)], (0,)),
    ("concat", lambda a, b: T.concat([a, b], axis=1), [(2, 3), (2, 2)], ()),
    ("total_variation", lambda x: T.total_variation(x), [(2, 2, 4, 4)], ()),
]


@pytest.mark.parametrize("name,fn,shapes,positive", GRAD_CASES, ids=[c[0] for c in GRAD_CASES])
def test_grad_check(name, fn, shapes, positive):
    assert grad_check(fn, shapes, seed=0, eps=1e-5, positive=positive) <= 1e-4


def test_cross_entropy_grad_check():
    labels = np.array([0, 2, 1, 2])
    err = grad_check(lambda x: cross_entropy(x, labels), [(4, 3)], seed=0, eps=1e-5)
    assert err <= 1e-4


def test_grad_check_multiple_seeds_matmul():
    for seed in range(10):
        assert grad_check(matmul, [(3, 4), (4, 2)], seed=seed) <= 1e-4
