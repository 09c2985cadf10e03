import numpy as np
import pytest

from refgrid import backend
from refgrid import tensor as T
from refgrid.tensor import ShapeError, Tape, Tensor, backward


def conv_oracle(x, w, stride):
    """Direct nested-loop cross-correlation over a pre-padded input."""
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    out = np.zeros((n, oh, ow, cout), dtype=np.float64)
    for b in range(n):
        for i in range(oh):
            for j in range(ow):
                patch = x[b, i * stride:i * stride + kh,
                          j * stride:j * stride + kw, :]
                for co in range(cout):
                    out[b, i, j, co] = np.sum(patch * w[:, :, :, co])
    return out


BACKENDS = backend.available_backends()


@pytest.fixture(params=BACKENDS)
def kernel_backend(request):
    with backend.use(request.param):
        yield request.param


class TestForward:
    def test_one_by_one_identity(self, kernel_backend):
        x = np.random.default_rng(0).standard_normal((1, 4, 4, 1)).astype(np.float32)
        w = np.ones((1, 1, 1, 1), dtype=np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), stride=1, padding="valid").data
        assert np.allclose(out, x)

    def test_zero_kernel(self, kernel_backend):
        x = np.random.default_rng(1).standard_normal((2, 5, 5, 3)).astype(np.float32)
        w = np.zeros((3, 3, 3, 2), dtype=np.float32)
        out = T.conv2d(Tensor(x), Tensor(w), padding="same").data
        assert np.allclose(out, 0.0)

    def test_uniform_kernel_local_means(self, kernel_backend):
        ramp = np.arange(25, dtype=np.float64).reshape(1, 5, 5, 1)
        w = np.full((3, 3, 1, 1), 1.0 / 9.0)
        out = T.conv2d(Tensor(ramp), Tensor(w), stride=1, padding="valid").data
        expect = conv_oracle(ramp, w, 1)
        assert out.shape == (1, 3, 3, 1)
        assert np.allclose(out, expect, atol=1e-5)
        # center of a linear ramp's 3x3 window is its mean
        assert abs(out[0, 1, 1, 0] - ramp[0, 2, 2, 0]) < 1e-5

    @pytest.mark.parametrize("stride,h", [(1, 7), (2, 7), (2, 8), (3, 9)])
    def test_matches_oracle(self, kernel_backend, stride, h):
        rng = np.random.default_rng(stride * 100 + h)
        x = rng.standard_normal((2, h, h, 3))
        w = rng.standard_normal((3, 3, 3, 4))
        out = T.conv2d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       stride=stride, padding="valid").data
        assert np.allclose(out, conv_oracle(x, w, stride), atol=1e-9)

    def test_same_padding_output_shape(self, kernel_backend):
        x = Tensor(np.zeros((1, 11, 11, 2), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 2, 4), dtype=np.float32))
        assert T.conv2d(x, w, stride=2, padding="same").data.shape == (1, 6, 6, 4)
        assert T.conv2d(x, w, stride=1, padding="same").data.shape == (1, 11, 11, 4)

    def test_rank3_input_accepted(self, kernel_backend):
        x = Tensor(np.zeros((5, 5, 2), dtype=np.float32))
        w = Tensor(np.zeros((3, 3, 2, 1), dtype=np.float32))
        out = T.conv2d(x, w, padding="same")
        assert out.data.shape == (5, 5, 1)


class TestErrors:
    def test_bad_stride(self):
        x = Tensor(np.zeros((1, 4, 4, 1)))
        w = Tensor(np.zeros((3, 3, 1, 1)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, stride=0)
        with pytest.raises(ValueError):
            T.conv2d(x, w, stride=-2)

    def test_kernel_exceeds_input(self):
        x = Tensor(np.zeros((1, 2, 2, 1)))
        w = Tensor(np.zeros((5, 5, 1, 1)))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, padding="valid")

    def test_bad_padding_name(self):
        x = Tensor(np.zeros((1, 4, 4, 1)))
        w = Tensor(np.zeros((3, 3, 1, 1)))
        with pytest.raises(ValueError):
            T.conv2d(x, w, padding="reflect")

    def test_channel_mismatch(self):
        x = Tensor(np.zeros((1, 4, 4, 2)))
        w = Tensor(np.zeros((3, 3, 3, 1)))
        with pytest.raises(ShapeError):
            T.conv2d(x, w, padding="same")


class TestBackward:
    @pytest.mark.parametrize("stride", [1, 2])
    def test_grads_match_fd(self, kernel_backend, stride):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 6, 6, 2))
        w = rng.standard_normal((3, 3, 2, 3)) * 0.5
        mix = rng.uniform(0.5, 1.5, size=(2,
                                          (6 + stride - 1) // stride,
                                          (6 + stride - 1) // stride, 3))

        def f(xa, wa):
            out = T.conv2d(Tensor(xa, dtype=np.float64),
                           Tensor(wa, dtype=np.float64),
                           stride=stride, padding="same")
            return float(T.tsum(T.mul(out, Tensor(mix))).data)

        tx = Tensor(x, requires_grad=True, dtype=np.float64)
        tw = Tensor(w, requires_grad=True, dtype=np.float64)
        with Tape():
            out = T.conv2d(tx, tw, stride=stride, padding="same")
            backward(T.tsum(T.mul(out, Tensor(mix))))

        eps = 1e-5
        for arr, tens in ((x, tx), (w, tw)):
            flat = arr.reshape(-1)
            idx = np.random.default_rng(0).choice(flat.size, 12, replace=False)
            for j in idx:
                orig = flat[j]
                flat[j] = orig + eps
                hi = f(x, w)
                flat[j] = orig - eps
                lo = f(x, w)
                flat[j] = orig
                num = (hi - lo) / (2 * eps)
                ana = tens.grad.reshape(-1)[j]
                assert abs(num - ana) < 1e-5 * max(1.0, abs(num))


class TestBackendParity:
    @pytest.mark.skipif(len(BACKENDS) < 2, reason="numba unavailable")
    @pytest.mark.parametrize("stride", [1, 2, 3])
    def test_forward_identical(self, stride):
        rng = np.random.default_rng(stride)
        x = rng.standard_normal((2, 9, 9, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        outs = {}
        for name in BACKENDS:
            with backend.use(name):
                outs[name] = T.conv2d(Tensor(x), Tensor(w), stride=stride,
                                      padding="same").data
        assert np.array_equal(outs["numpy"], outs["numba"])

    @pytest.mark.skipif(len(BACKENDS) < 2, reason="numba unavailable")
    def test_backward_close(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        grads = {}
        for name in BACKENDS:
            with backend.use(name):
                tx = Tensor(x, requires_grad=True)
                tw = Tensor(w, requires_grad=True)
                with Tape():
                    out = T.conv2d(tx, tw, stride=2, padding="same")
                    backward(T.tsum(T.mul(out, out)))
                grads[name] = (tx.grad.copy(), tw.grad.copy())
        for a, b in zip(grads["numpy"], grads["numba"]):
            assert np.allclose(a, b, rtol=1e-4, atol=1e-4)

    def test_each_backend_deterministic(self, kernel_backend):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 8, 8, 3)).astype(np.float32)
        w = rng.standard_normal((3, 3, 3, 4)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), stride=1, padding="same").data
        b = T.conv2d(Tensor(x), Tensor(w), stride=1, padding="same").data
        assert np.array_equal(a, b)
