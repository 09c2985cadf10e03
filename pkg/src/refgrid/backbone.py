"""Strided convolutional backbone and the per-scale projection layers.

Four stride-2 blocks (conv -> batch norm -> leaky relu) turn an H x H x 3
image into three feature maps at H/4, H/8, and H/16 resolution; two stride-1
blocks then widen each coarse cell's receptive field to roughly the canvas
width (95 px at H=96), so every cell can see its nearest image border
(absolute-position phrases are unanswerable without that) and any nearby
companion objects.  The projector brings the three maps to the
coarsest grid with a common channel count: a 3x3 stride-4 conv for the
finest map, 3x3 stride-2 for the middle one, and 1x1 for the coarsest.
"""

import numpy as np

from . import tensor as T


class ConvBlock:
    """conv (no bias) -> batch norm -> leaky relu, with running statistics."""

    def __init__(self, rng, in_ch, out_ch, ksize, stride, slope=0.1,
                 dtype=np.float32, trainable=True, eps=1e-5, momentum=0.1):
        fan_in = ksize * ksize * in_ch
        std = np.sqrt(2.0 / fan_in)
        self.kernel = T.Tensor(
            rng.normal(0.0, std, size=(ksize, ksize, in_ch, out_ch)),
            requires_grad=trainable, dtype=dtype)
        self.gamma = T.Tensor(np.ones(out_ch), requires_grad=trainable, dtype=dtype)
        self.beta = T.Tensor(np.zeros(out_ch), requires_grad=trainable, dtype=dtype)
        self.running_mean = np.zeros(out_ch, dtype=np.float64)
        self.running_var = np.ones(out_ch, dtype=np.float64)
        self.stride = stride
        self.slope = slope
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, mode):
        y = T.conv2d(x, self.kernel, stride=self.stride, padding="same")
        y = T.batch_norm(y, self.gamma, self.beta, self.running_mean,
                         self.running_var, mode, eps=self.eps,
                         momentum=self.momentum)
        return T.leaky_relu(y, self.slope)

    def parameters(self, prefix):
        return {f"{prefix}.kernel": self.kernel,
                f"{prefix}.gamma": self.gamma,
                f"{prefix}.beta": self.beta}

    def buffers(self, prefix):
        return {f"{prefix}.running_mean": self.running_mean,
                f"{prefix}.running_var": self.running_var}


class MultiScaleBackbone:
    """Produces feature maps at exact 4:2:1 scale ratios from a square image."""

    def __init__(self, image_size=96, channels=(16, 32, 64, 128), slope=0.1,
                 seed=0, dtype=np.float32, trainable=True):
        if image_size % 16 != 0:
            raise ValueError(f"image size must be divisible by 16, got {image_size}")
        self.image_size = image_size
        self.grid = image_size // 16
        self.channels = tuple(channels)
        rng = np.random.default_rng(seed)
        c1, c2, c3, c4 = self.channels
        self.blocks = [
            ConvBlock(rng, 3, c1, 3, 2, slope, dtype, trainable),
            ConvBlock(rng, c1, c2, 3, 2, slope, dtype, trainable),
            ConvBlock(rng, c2, c3, 3, 2, slope, dtype, trainable),
            ConvBlock(rng, c3, c4, 3, 2, slope, dtype, trainable),
            ConvBlock(rng, c4, c4, 3, 1, slope, dtype, trainable),
            ConvBlock(rng, c4, c4, 3, 1, slope, dtype, trainable),
        ]

    def extract(self, image, mode):
        """Image (B, H, H, 3) -> maps at H/4, H/8, H/16 resolution."""
        if image.ndim != 4 or image.shape[3] != 3:
            raise T.ShapeError(f"expected (B, H, H, 3) image batch, got {image.shape}")
        if image.shape[1] != self.image_size or image.shape[2] != self.image_size:
            raise T.ShapeError(
                f"expected {self.image_size}x{self.image_size} input, "
                f"got {image.shape[1]}x{image.shape[2]}")
        x = self.blocks[0](image, mode)
        fine = self.blocks[1](x, mode)
        mid = self.blocks[2](fine, mode)
        coarse = self.blocks[3](mid, mode)
        coarse = self.blocks[4](coarse, mode)
        coarse = self.blocks[5](coarse, mode)
        return fine, mid, coarse

    def parameters(self):
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.parameters(f"backbone.b{i}"))
        return out

    def buffers(self):
        out = {}
        for i, b in enumerate(self.blocks):
            out.update(b.buffers(f"backbone.b{i}"))
        return out


class ScaleProjector:
    """Brings the three maps to a common (grid, grid, out_ch) shape."""

    def __init__(self, channels, out_ch=64, slope=0.1, seed=0,
                 dtype=np.float32, trainable=True):
        _, c2, c3, c4 = channels
        rng = np.random.default_rng(seed + 17)
        self.fine = ConvBlock(rng, c2, out_ch, 3, 4, slope, dtype, trainable)
        self.mid = ConvBlock(rng, c3, out_ch, 3, 2, slope, dtype, trainable)
        self.coarse = ConvBlock(rng, c4, out_ch, 1, 1, slope, dtype, trainable)
        self.out_ch = out_ch

    def project(self, fine, mid, coarse, mode):
        p1 = self.fine(fine, mode)
        p2 = self.mid(mid, mode)
        p3 = self.coarse(coarse, mode)
        if not (p1.shape == p2.shape == p3.shape):
            raise T.ShapeError(
                f"projected maps disagree: {p1.shape}, {p2.shape}, {p3.shape}")
        return p1, p2, p3

    def parameters(self):
        out = {}
        out.update(self.fine.parameters("project.fine"))
        out.update(self.mid.parameters("project.mid"))
        out.update(self.coarse.parameters("project.coarse"))
        return out

    def buffers(self):
        out = {}
        out.update(self.fine.buffers("project.fine"))
        out.update(self.mid.buffers("project.mid"))
        out.update(self.coarse.buffers("project.coarse"))
        return out
