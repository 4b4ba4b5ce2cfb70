import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from helpers import autodiff_grads, gradcheck, projected
from sdnet import tensor as T
from sdnet.tensor import NonFiniteError, ShapeError, TapeError, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    def test_identity(self):
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal((Tensor(np.eye(2)) @ b).data, b.data)

    def test_two_by_two_against_triple_loop(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        expected = naive_matmul(a, b)
        np.testing.assert_array_equal(expected, [[19, 22], [43, 50]])
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_zeros(self, rng):
        out = Tensor(np.zeros((2, 3))) @ Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_batched_broadcast(self, rng):
        a = rng.standard_normal((4, 2, 3))
        b = rng.standard_normal((1, 3, 5))
        out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        for i in range(4):
            np.testing.assert_allclose(out.data[i], naive_matmul(a[i], b[0]), rtol=1e-12)

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))

    def test_gradient(self, rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 2))
        fn = projected(T.matmul, (2, 3, 2))
        assert gradcheck(fn, [a, b]) < 1e-4


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)

    def test_shift_invariance(self):
        base = T.softmax(Tensor([0.0, 0.5, 1.0], dtype=np.float64)).data
        shifted = T.softmax(Tensor([100.0, 100.5, 101.0], dtype=np.float64)).data
        np.testing.assert_allclose(base, shifted, rtol=1e-12)

    def test_known_values(self):
        x = np.array([1.0, 2.0, 3.0])
        oracle = np.exp(x) / np.exp(x).sum()
        np.testing.assert_allclose(oracle, [0.09003, 0.24473, 0.66524], atol=5e-6)
        np.testing.assert_allclose(T.softmax(Tensor(x, dtype=np.float64)).data, oracle, rtol=1e-12)

    def test_all_neg_inf_slice_is_an_error(self):
        with pytest.raises(ValueError, match="degenerate"):
            T.softmax(Tensor([[0.0, 1.0], [-np.inf, -np.inf]]))

    def test_gradient(self, rng):
        x = rng.standard_normal((3, 5))
        assert gradcheck(projected(lambda t: T.softmax(t, axis=-1), (3, 5)), [x]) < 1e-4
        assert gradcheck(projected(lambda t: T.softmax(t, axis=0), (3, 5)), [x]) < 1e-4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 7)),
              elements=st.floats(-50, 50)))
def test_softmax_slices_are_distributions(x):
    y = T.softmax(Tensor(x, dtype=np.float32), axis=-1).data
    assert np.all((y >= 0) & (y <= 1))
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


class TestLayerNorm:
    def test_constant_slice_gives_zero(self):
        x = Tensor(np.full((2, 4), 3.0))
        out = T.layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_zero_gain_returns_beta(self, rng):
        beta = rng.standard_normal(5)
        out = T.layer_norm(Tensor(rng.standard_normal((3, 5))), Tensor(np.zeros(5)), Tensor(beta))
        np.testing.assert_allclose(out.data, np.broadcast_to(beta, (3, 5)), rtol=1e-6)

    def test_known_values(self):
        x = np.array([1.0, 2.0, 3.0])
        oracle = (x - 2.0) / math.sqrt(2.0 / 3.0 + 1e-5)
        np.testing.assert_allclose(oracle, [-1.22474, 0.0, 1.22474], atol=5e-5)
        out = T.layer_norm(Tensor(x, dtype=np.float64), Tensor(np.ones(3), dtype=np.float64),
                           Tensor(np.zeros(3), dtype=np.float64), eps=1e-5)
        np.testing.assert_allclose(out.data, oracle, rtol=1e-12)

    def test_empty_axis(self):
        with pytest.raises(ShapeError):
            T.layer_norm(Tensor(np.zeros((2, 0))), Tensor(np.zeros(0)), Tensor(np.zeros(0)))

    def test_gradient(self, rng):
        x, g, b = rng.standard_normal((2, 3, 6)), rng.standard_normal(6), rng.standard_normal(6)
        assert gradcheck(projected(T.layer_norm, (2, 3, 6)), [x, g, b]) < 1e-4


class TestGelu:
    def test_values(self):
        oracle = 1.0 * 0.5 * (1 + math.erf(1.0 / math.sqrt(2)))
        assert oracle == pytest.approx(0.8413447, abs=1e-7)
        out = T.gelu(Tensor([0.0, 1.0, 30.0], dtype=np.float64)).data
        assert out[0] == 0.0
        assert out[1] == pytest.approx(oracle, rel=1e-12)
        assert out[2] == pytest.approx(30.0, rel=1e-12)

    def test_gradient(self, rng):
        x = rng.standard_normal((4, 4)) * 2
        assert gradcheck(projected(T.gelu, (4, 4)), [x]) < 1e-4


class TestDepthwiseConv:
    def test_unit_kernel_is_identity(self, rng):
        x = rng.random((3, 5, 6)).astype(np.float32)
        np.testing.assert_array_equal(T.depthwise_conv2d(Tensor(x), np.ones((1, 1))).data, x)

    def test_uniform_kernel_on_constant(self):
        out = T.depthwise_conv2d(Tensor(np.full((2, 6, 6), 0.7), dtype=np.float64), np.full((3, 3), 1 / 9))
        np.testing.assert_allclose(out.data, 0.7, rtol=1e-12)

    def test_ramp(self):
        ramp = np.arange(9.0).reshape(1, 3, 3)
        total = 0.0
        for i in range(3):
            for j in range(3):
                total += ramp[0, i, j] / 9.0
        out = T.depthwise_conv2d(Tensor(ramp, dtype=np.float64), np.full((3, 3), 1 / 9))
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == pytest.approx(total, rel=1e-12)

    def test_kernel_too_large(self):
        with pytest.raises(ShapeError):
            T.depthwise_conv2d(Tensor(np.zeros((1, 4, 4))), np.ones((5, 5)))

    def test_gradient(self, rng):
        x = rng.standard_normal((2, 6, 7))
        k = rng.standard_normal((3, 3))
        fn = projected(lambda t: T.depthwise_conv2d(t, k), (2, 4, 5))
        assert gradcheck(fn, [x]) < 1e-4


class TestBackward:
    def test_sum(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        T.backward(x.sum())
        np.testing.assert_array_equal(x.grad, np.ones((2, 2)))

    def test_square(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        T.backward((x * x).sum())
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_fan_out_accumulates(self):
        x = Tensor([3.0], requires_grad=True)
        y = x * 2.0
        T.backward((y + y + x).sum())
        np.testing.assert_array_equal(x.grad, [5.0])

    def test_non_scalar_loss(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(x * 2.0)

    def test_second_backward_is_an_error(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * x).sum()
        T.backward(loss)
        with pytest.raises(TapeError):
            T.backward(loss)

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (x * 2.0).sum()
        assert not y.requires_grad

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_raises(self):
        with pytest.raises(NonFiniteError):
            Tensor([0.0]) / Tensor([0.0])

    def test_composed_graph(self, rng):
        a, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 4)), rng.standard_normal(4)

        def fn(a, w, b):
            h = T.gelu(T.linear(a, w, b))
            return T.mean(T.abs_(T.softmax(h, -1) * h - 0.1))

        assert gradcheck(fn, [a, w, b]) < 1e-4


# every remaining op, each against central differences
ELEMENTWISE_CASES = [
    ("add", lambda a, b: a + b, [(2, 3), (1, 3)]),
    ("sub", lambda a, b: a - b, [(2, 3), (2, 1)]),
    ("mul", lambda a, b: a * b, [(2, 3), (3,)]),
    ("div", lambda a, b: a / (b * b + 1.0), [(2, 3), (2, 3)]),
    ("scale", lambda a: T.scale(a, -2.5), [(3, 2)]),
    ("abs", lambda a: T.abs_(a), [(3, 3)]),
    ("reshape", lambda a: a.reshape(3, 4), [(2, 6)]),
    ("permute", lambda a: a.permute(2, 0, 1), [(2, 3, 4)]),
    ("transpose", lambda a: a.transpose(0, 1), [(2, 3, 4)]),
    ("sum_axis", lambda a: T.sum_(a, axis=1, keepdims=True), [(2, 3, 4)]),
    ("mean_axes", lambda a: T.mean(a, axis=(0, 2)), [(2, 3, 4)]),
    ("slice", lambda a: a[1:, ::2], [(3, 5)]),
    ("concat", lambda a, b: T.concatenate([a, b], axis=1), [(2, 3), (2, 2)]),
    ("roll", lambda a: T.roll(a, (2, -1), (0, 1)), [(4, 5, 2)]),
    ("take", lambda a: T.take(a, np.array([[0, 2], [2, 1]])), [(3, 2)]),
    ("linear", lambda x, w, b: T.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
]


@pytest.mark.parametrize("name,op,shapes", ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
def test_op_gradients(name, op, shapes, rng):
    xs = [rng.standard_normal(s) for s in shapes]
    with T.no_grad():
        out_shape = op(*[Tensor(x, dtype=np.float64) for x in xs]).shape
    assert gradcheck(projected(op, out_shape), xs) < 1e-4


def test_reshape_permute_round_trip_bit_exact(rng):
    x = Tensor(rng.standard_normal((2, 3, 4, 5)).astype(np.float32))
    back = x.permute(3, 1, 0, 2).reshape(60, 2).reshape(5, 3, 2, 4).permute(2, 1, 3, 0)
    np.testing.assert_array_equal(back.data, x.data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 20), st.integers(2, 9), st.integers(2, 9))
def test_roll_round_trip_bit_exact(s, h, w):
    x = Tensor(np.random.default_rng(s).standard_normal((h, w, 3)).astype(np.float32))
    back = T.roll(T.roll(x, (s, s), (0, 1)), (-s, -s), (0, 1))
    np.testing.assert_array_equal(back.data, x.data)


def test_deterministic(rng):
    a = rng.standard_normal((8, 16)).astype(np.float32)
    w = rng.standard_normal((16, 16)).astype(np.float32)

    def run():
        x = Tensor(a)
        wt = Tensor(w, requires_grad=True)
        y = T.softmax(T.linear(x, wt), -1)
        loss = T.sum_(y * y)
        T.backward(loss)
        return y.data, wt.grad

    (y1, g1), (y2, g2) = run(), run()
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(g1, g2)


def test_float64_mode_is_preserved():
    x = Tensor(np.ones(3), dtype=np.float64, requires_grad=True)
    y = T.gelu(x * 2.0)
    assert y.dtype == np.float64
    (g,) = autodiff_grads(lambda t: T.sum_(t * 2.0), [np.ones(3)])
    assert g.dtype == np.float64
