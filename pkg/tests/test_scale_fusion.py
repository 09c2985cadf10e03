"""Text-conditioned convex mixing of the projected feature maps."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import refgrid.tensor as T
from refgrid.scale_fusion import ScaleFusion


def _maps(batch=2, grid=3, ch=4, seed=0):
    rng = np.random.default_rng(seed)
    return [T.Tensor(rng.normal(size=(batch, grid, grid, ch)))
            for _ in range(3)]


class TestPredictWeights:
    def test_rows_are_simplex(self):
        sf = ScaleFusion(text_dim=6, seed=0)
        text = T.Tensor(np.random.default_rng(1).normal(size=(5, 6)))
        w = sf.predict_weights(text).data
        assert w.shape == (5, 3)
        assert np.all(w > 0)
        assert np.allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_text_gives_uniform_weights(self):
        # Bias starts at zero, so a zero text feature yields zero logits and
        # the softmax is exactly uniform.
        sf = ScaleFusion(text_dim=4, seed=3)
        w = sf.predict_weights(T.Tensor(np.zeros((2, 4)))).data
        assert np.allclose(w, 1.0 / 3.0, atol=1e-7)

    def test_known_logit_softmax(self):
        # Force logits (2, 0, 0) through the bias: softmax values are the
        # frozen constants e^2/(e^2+2) and 1/(e^2+2).
        sf = ScaleFusion(text_dim=4, seed=0)
        sf.bias.data[:] = np.array([2.0, 0.0, 0.0], dtype=sf.bias.data.dtype)
        w = sf.predict_weights(T.Tensor(np.zeros((1, 4)))).data[0]
        assert w[0] == pytest.approx(0.7869860421615985, abs=1e-6)
        assert w[1] == pytest.approx(0.10650697891920075, abs=1e-6)
        assert w[2] == pytest.approx(0.10650697891920075, abs=1e-6)


class TestFuse:
    def test_one_hot_selects_single_map(self):
        sf = ScaleFusion(text_dim=4, seed=0)
        maps = _maps()
        one_hot = T.Tensor(np.tile([0.0, 1.0, 0.0], (2, 1)))
        fused = sf.fuse(maps, one_hot)
        assert np.allclose(fused.data, maps[1].data, atol=1e-6)

    def test_matches_numpy_weighted_sum(self):
        sf = ScaleFusion(text_dim=4, seed=0)
        maps = _maps(seed=5)
        w = np.array([[0.2, 0.3, 0.5], [0.6, 0.1, 0.3]], dtype=np.float32)
        fused = sf.fuse(maps, T.Tensor(w))
        want = sum(w[:, i, None, None, None] * maps[i].data for i in range(3))
        assert np.allclose(fused.data, want, atol=1e-6)

    def test_per_sample_weights_stay_separate(self):
        # Sample 0 selects map 0, sample 1 selects map 2: no cross-talk.
        sf = ScaleFusion(text_dim=4, seed=0)
        maps = _maps(seed=6)
        w = T.Tensor(np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]))
        fused = sf.fuse(maps, w)
        assert np.allclose(fused.data[0], maps[0].data[0], atol=1e-6)
        assert np.allclose(fused.data[1], maps[2].data[1], atol=1e-6)

    def test_wrong_count_or_shape_rejected(self):
        sf = ScaleFusion(text_dim=4, seed=0)
        maps = _maps()
        w = T.Tensor(np.full((2, 3), 1.0 / 3.0))
        with pytest.raises(T.ShapeError):
            sf.fuse(maps[:2], w)
        bad = maps[:2] + [T.Tensor(np.zeros((2, 4, 4, 4)))]
        with pytest.raises(T.ShapeError):
            sf.fuse(bad, w)

    @given(a=st.floats(0.01, 1), b=st.floats(0.01, 1), c=st.floats(0.01, 1))
    @settings(max_examples=30, deadline=None)
    def test_convexity_bounds(self, a, b, c):
        # A convex combination stays inside the elementwise min/max envelope.
        total = a + b + c
        w = np.array([[a / total, b / total, c / total]], dtype=np.float64)
        sf = ScaleFusion(text_dim=4, seed=0)
        maps = _maps(batch=1, seed=7)
        fused = sf.fuse(maps, T.Tensor(w)).data
        stack = np.stack([m.data for m in maps])
        assert np.all(fused <= stack.max(axis=0) + 1e-5)
        assert np.all(fused >= stack.min(axis=0) - 1e-5)


def test_end_to_end_gradients():
    sf = ScaleFusion(text_dim=4, seed=2)
    maps = _maps(seed=8)
    text = T.Tensor(np.random.default_rng(9).normal(size=(2, 4)),
                    requires_grad=True)
    with T.Tape():
        w = sf.predict_weights(text)
        fused = sf.fuse(maps, w)
        T.backward(T.tsum(fused))
    assert text.grad is not None and np.any(text.grad != 0)
    assert sf.weight.grad is not None
    assert sf.bias.grad is not None
