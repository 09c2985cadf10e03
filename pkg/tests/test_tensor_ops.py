import numpy as np
import pytest

try:
    from hypothesis import given, settings
    from hypothesis import strategies as st
    HAVE_HYPOTHESIS = True
except ImportError:
    HAVE_HYPOTHESIS = False

from refgrid import tensor as T
from refgrid.tensor import NumericError, ShapeError, Tape, Tensor, backward


def scalar(x):
    return float(x.data)


class TestTensorBasics:
    def test_float32_default(self):
        t = Tensor([1.0, 2.0])
        assert t.data.dtype == np.float32

    def test_float64_preserved(self):
        t = Tensor(np.array([1.0], dtype=np.float64))
        assert t.data.dtype == np.float64
        out = T.sigmoid(t)
        assert out.data.dtype == np.float64

    def test_grad_starts_none(self):
        assert Tensor([1.0], requires_grad=True).grad is None


class TestBackwardContract:
    def test_scalar_only(self):
        with Tape():
            v = T.add(Tensor([1.0, 2.0], requires_grad=True), Tensor([1.0, 1.0]))
            with pytest.raises(ShapeError):
                backward(v)

    def test_requires_tape(self):
        x = Tensor([2.0], requires_grad=True)
        y = T.tsum(x)
        with pytest.raises(RuntimeError):
            backward(y)

    def test_single_use(self):
        x = Tensor([2.0], requires_grad=True)
        with Tape():
            y = T.tsum(T.mul(x, x))
            backward(y)
            with pytest.raises(RuntimeError):
                backward(y)

    def test_accumulates_across_branches(self):
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            y = T.add(T.mul(x, x), x)  # d/dx (x^2 + x) = 2x + 1
            backward(T.tsum(y))
        assert np.allclose(x.grad, [7.0])

    def test_no_grad_outside_tape(self):
        x = Tensor([3.0], requires_grad=True)
        y = T.mul(x, x)
        assert y._tape is None


class TestArithmetic:
    def test_add_known(self):
        assert np.allclose(T.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data,
                           [4.0, 6.0])

    def test_broadcast_add_grad(self):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones((3,)), requires_grad=True)
        with Tape():
            backward(T.tsum(T.add(a, b)))
        assert a.grad.shape == (2, 3) and np.allclose(a.grad, 1.0)
        assert b.grad.shape == (3,) and np.allclose(b.grad, 2.0)

    def test_mul_grad(self):
        a = Tensor([2.0, 3.0], requires_grad=True)
        b = Tensor([5.0, 7.0], requires_grad=True)
        with Tape():
            backward(T.tsum(T.mul(a, b)))
        assert np.allclose(a.grad, [5.0, 7.0])
        assert np.allclose(b.grad, [2.0, 3.0])

    def test_operator_sugar(self):
        a, b = Tensor([2.0]), Tensor([3.0])
        assert scalar(T.tsum(a + b)) == 5.0
        assert scalar(T.tsum(a - b)) == -1.0
        assert scalar(T.tsum(a * b)) == 6.0
        assert scalar(T.tsum(-a)) == -2.0


class TestMatmul:
    def test_identity(self):
        m = np.arange(9, dtype=np.float64).reshape(3, 3)
        out = T.matmul(Tensor(np.eye(3)), Tensor(m))
        assert np.allclose(out.data, m)

    def test_zeros(self):
        out = T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        assert np.allclose(out.data, 0.0)

    def test_hand_value(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        assert np.allclose(out.data, [[17.0], [39.0]])

    def test_shape_mismatch_reports_both(self):
        with pytest.raises(ShapeError) as exc:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert "(2, 3)" in str(exc.value) and "(4, 2)" in str(exc.value)


class TestReductionsReshape:
    def test_sum_axis_keepdims(self):
        x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        assert T.tsum(x, axis=1, keepdims=True).data.shape == (2, 1)
        assert np.allclose(T.tsum(x, axis=0).data, [3.0, 5.0, 7.0])

    def test_mean(self):
        x = Tensor([1.0, 2.0, 3.0, 6.0])
        assert scalar(T.tmean(x)) == 3.0

    def test_mean_grad_uniform(self):
        x = Tensor(np.ones(4), requires_grad=True)
        with Tape():
            backward(T.tmean(x))
        assert np.allclose(x.grad, 0.25)

    def test_reshape_roundtrip(self):
        x = np.arange(12, dtype=np.float32).reshape(3, 4)
        out = T.reshape(Tensor(x), (2, 6))
        assert out.data.shape == (2, 6)
        assert np.array_equal(out.data.reshape(3, 4), x)

    def test_reshape_bad_size(self):
        with pytest.raises(ShapeError):
            T.reshape(Tensor(np.ones(5)), (2, 3))


class TestActivations:
    def test_sigmoid_known(self):
        out = T.sigmoid(Tensor([0.0, 1.0]))
        assert np.allclose(out.data, [0.5, 0.7310586], atol=1e-6)

    def test_sigmoid_extreme_stable(self):
        out = T.sigmoid(Tensor([-1000.0, 1000.0]))
        assert np.all(np.isfinite(out.data))
        assert np.allclose(out.data, [0.0, 1.0])

    def test_tanh_known(self):
        assert np.allclose(T.tanh(Tensor([0.0, 1.0])).data,
                           [0.0, np.tanh(1.0)], atol=1e-6)

    def test_leaky_relu_values(self):
        out = T.leaky_relu(Tensor([-2.0, 0.0, 3.0]), 0.1)
        assert np.allclose(out.data, [-0.2, 0.0, 3.0])

    def test_leaky_relu_slope_validated(self):
        with pytest.raises(ValueError):
            T.leaky_relu(Tensor([1.0]), 1.5)
        with pytest.raises(ValueError):
            T.leaky_relu(Tensor([1.0]), 0.0)


class TestSoftmax:
    def test_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).standard_normal((4, 7)) * 10)
        out = T.softmax(x, axis=1).data
        assert np.allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(out >= 0)

    def test_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        a = T.softmax(Tensor(x), axis=1).data
        b = T.softmax(Tensor(x + 500.0), axis=1).data
        assert np.allclose(a, b, atol=1e-6)

    def test_known_values(self):
        out = T.softmax(Tensor([[2.0, 0.0, 0.0]]), axis=1).data
        assert np.allclose(out, [[0.7869860, 0.1065070, 0.1065070]], atol=1e-6)

    def test_overflow_safe(self):
        out = T.softmax(Tensor([[1000.0, 0.0]]), axis=1).data
        assert np.all(np.isfinite(out))


class TestLosses:
    def test_bce_matches_naive_where_finite(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((5, 4)) * 3
        t = rng.uniform(0.05, 0.95, size=(5, 4))
        stable = scalar(T.bce_with_logits(Tensor(x), Tensor(t)))
        p = 1.0 / (1.0 + np.exp(-x))
        naive = float(np.mean(-t * np.log(p) - (1 - t) * np.log(1 - p)))
        assert abs(stable - naive) < 1e-6

    def test_bce_extreme_logits_finite(self):
        out = scalar(T.bce_with_logits(Tensor([[-500.0, 500.0]]),
                                       Tensor([[0.0, 1.0]])))
        assert np.isfinite(out) and out < 1e-6

    def test_bce_target_range_checked(self):
        with pytest.raises(ValueError):
            T.bce_with_logits(Tensor([[0.0]]), Tensor([[1.5]]))

    def test_bce_shape_checked(self):
        with pytest.raises(ShapeError):
            T.bce_with_logits(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))

    def test_smooth_l1_branches(self):
        # |d| < 1 -> 0.5 d^2 ; |d| >= 1 -> |d| - 0.5
        assert abs(scalar(T.smooth_l1(Tensor([0.5]), Tensor([0.0]))) - 0.125) < 1e-7
        assert abs(scalar(T.smooth_l1(Tensor([3.0]), Tensor([0.0]))) - 2.5) < 1e-7

    def test_smooth_l1_mean_reduction(self):
        out = scalar(T.smooth_l1(Tensor([0.5, 3.0]), Tensor([0.0, 0.0])))
        assert abs(out - (0.125 + 2.5) / 2) < 1e-7


class TestSplitConcat:
    def test_roundtrip_bitwise(self, rng):
        x = rng.standard_normal((2, 3, 3, 6)).astype(np.float32)
        parts = T.split_channels(Tensor(x), 3)
        assert len(parts) == 3
        assert all(p.data.shape == (2, 3, 3, 2) for p in parts)
        back = T.concat_channels(parts)
        assert np.array_equal(back.data, x)

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            T.split_channels(Tensor(np.zeros((1, 2, 2, 5))), 2)

    def test_split_grads_scatter(self):
        x = Tensor(np.ones((1, 1, 1, 4)), requires_grad=True)
        with Tape():
            parts = T.split_channels(x, 2)
            backward(T.tsum(T.mul(parts[1], Tensor(np.full((1, 1, 1, 2), 3.0)))))
        assert np.allclose(x.grad.reshape(-1), [0, 0, 3, 3])


class TestGatherTake:
    def test_gather_rows_values(self):
        table = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3))
        out = T.gather_rows(table, np.array([2, 0]))
        assert np.allclose(out.data, [[6, 7, 8], [0, 1, 2]])

    def test_gather_repeated_accumulates(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        with Tape():
            out = T.gather_rows(table, np.array([1, 1, 2]))
            backward(T.tsum(out))
        assert np.allclose(table.grad, [[0, 0], [2, 2], [1, 1]])

    def test_take_flat_values(self):
        a = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
        out = T.take_flat(a, np.array([0, 4, 5]))
        assert np.allclose(out.data, [0, 4, 5])

    def test_take_flat_out_of_range(self):
        with pytest.raises(IndexError):
            T.take_flat(Tensor(np.zeros(4)), np.array([4]))


class TestBatchNorm:
    def test_train_normalizes(self, rng):
        x = rng.standard_normal((8, 3, 3, 2)) * 5 + 7
        gamma, beta = Tensor(np.ones(2)), Tensor(np.zeros(2))
        rm, rv = np.zeros(2), np.ones(2)
        out = T.batch_norm(Tensor(x), gamma, beta, rm, rv, mode="train").data
        assert np.allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-5)
        assert np.allclose(out.std(axis=(0, 1, 2)), 1.0, atol=1e-3)

    def test_running_stats_update(self, rng):
        x = rng.standard_normal((8, 2, 2, 3)) + 2.0
        rm, rv = np.zeros(3), np.ones(3)
        T.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)),
                     rm, rv, mode="train")
        batch_mean = x.mean(axis=(0, 1, 2))
        assert np.allclose(rm, 0.1 * batch_mean, atol=1e-6)

    def test_eval_uses_buffers(self):
        x = np.full((1, 1, 1, 2), 4.0)
        rm, rv = np.array([2.0, 2.0]), np.array([4.0, 4.0])
        out = T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)),
                           rm, rv, mode="eval").data
        assert np.allclose(out, (4.0 - 2.0) / np.sqrt(4.0 + 1e-5), atol=1e-5)
        assert np.allclose(rm, [2.0, 2.0])  # eval must not touch buffers

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(NumericError):
            T.batch_norm(Tensor(np.ones((1, 2, 2, 2))), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                         mode="train")

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            T.batch_norm(Tensor(np.ones((2, 2, 2, 2))), Tensor(np.ones(2)),
                         Tensor(np.zeros(2)), np.zeros(2), np.ones(2),
                         mode="test")


class TestDebugMode:
    def test_nan_flagged(self, monkeypatch):
        monkeypatch.setenv("RGIN_DEBUG", "1")
        bad = Tensor([np.inf])
        with pytest.raises(NumericError):
            T.sub(bad, bad)  # inf - inf -> nan

    def test_off_by_default(self, monkeypatch):
        monkeypatch.delenv("RGIN_DEBUG", raising=False)
        bad = Tensor([np.inf])
        out = T.sub(bad, bad)
        assert np.isnan(out.data).any()


if HAVE_HYPOTHESIS:
    finite = st.floats(min_value=-50, max_value=50,
                       allow_nan=False, allow_infinity=False)

    class TestProperties:
        @given(st.lists(finite, min_size=1, max_size=16))
        @settings(max_examples=40, deadline=None)
        def test_softmax_simplex(self, values):
            out = T.softmax(Tensor(np.array(values, dtype=np.float64)),
                            axis=0).data
            assert abs(out.sum() - 1.0) < 1e-6
            assert np.all(out >= 0)

        @given(st.lists(finite, min_size=2, max_size=12),
               st.integers(min_value=1, max_value=3))
        @settings(max_examples=40, deadline=None)
        def test_split_concat_identity(self, values, k):
            n = len(values) - len(values) % k
            if n == 0:
                return
            x = np.array(values[:n], dtype=np.float32).reshape(1, 1, 1, n)
            parts = T.split_channels(Tensor(x), k)
            assert np.array_equal(T.concat_channels(parts).data, x)

        @given(st.lists(finite, min_size=1, max_size=10))
        @settings(max_examples=40, deadline=None)
        def test_sigmoid_bounds(self, values):
            out = T.sigmoid(Tensor(np.array(values, dtype=np.float64))).data
            assert np.all(out >= 0.0) and np.all(out <= 1.0)
