"""Text-conditioned fusion of the three projected feature maps.

A linear layer maps the text feature to three logits; their softmax gives
per-scale weights, and the fused map is the weighted sum of the projected
maps.  The weights form a convex combination, so the fused activations stay
on the scale of the inputs and the weights themselves are directly
reportable.
"""

import numpy as np

from . import tensor as T


class ScaleFusion:
    """Predicts per-scale weights from text and mixes the projected maps."""

    def __init__(self, text_dim, num_scales=3, seed=0, dtype=np.float32,
                 trainable=True):
        rng = np.random.default_rng(seed + 29)
        lim = 1.0 / np.sqrt(text_dim)
        self.weight = T.Tensor(
            rng.uniform(-lim, lim, size=(text_dim, num_scales)),
            requires_grad=trainable, dtype=dtype)
        self.bias = T.Tensor(np.zeros(num_scales), requires_grad=trainable,
                             dtype=dtype)
        self.num_scales = num_scales

    def predict_weights(self, text_feat):
        """(B, text_dim) -> (B, num_scales) softmax weights."""
        logits = T.add(T.matmul(text_feat, self.weight), self.bias)
        return T.softmax(logits, axis=1)

    def fuse(self, maps, weights):
        """Weighted sum of equally shaped maps; weights column i scales map i."""
        if len(maps) != self.num_scales:
            raise T.ShapeError(
                f"expected {self.num_scales} maps, got {len(maps)}")
        shape = maps[0].shape
        for m in maps[1:]:
            if m.shape != shape:
                raise T.ShapeError(f"map shapes differ: {shape} vs {m.shape}")
        batch = shape[0]
        cols = np.arange(batch) * self.num_scales
        fused = None
        for i, m in enumerate(maps):
            w_i = T.reshape(T.take_flat(weights, cols + i), (batch, 1, 1, 1))
            term = T.mul(w_i, m)
            fused = term if fused is None else T.add(fused, term)
        return fused

    def parameters(self):
        return {"scale_fusion.weight": self.weight,
                "scale_fusion.bias": self.bias}
