"""Pure-numpy convolution kernels (im2col / col2im via BLAS matmul).

These are the fallback implementations behind :mod:`refgrid.backend`; the
accelerated twins live in :mod:`refgrid.kernels_numba`.  All three functions
operate on channels-last arrays and expect the input to be *already padded* —
padding policy lives in the tensor op, not here.
"""

import numpy as np


def conv2d_forward(xp, w, stride):
    """Cross-correlate padded input (B,Hp,Wp,Cin) with kernel (kh,kw,Cin,Cout)."""
    kh, kw, cin, cout = w.shape
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, Cin, kh, kw)
    b, ho, wo = win.shape[:3]
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3))
    cols = cols.reshape(b * ho * wo, kh * kw * cin)
    out = cols @ w.reshape(kh * kw * cin, cout)
    return out.reshape(b, ho, wo, cout)


def conv2d_backward_input(g, w, stride, hp, wp):
    """Gradient w.r.t. the padded input: scatter one shifted GEMM per kernel tap."""
    b, ho, wo, cout = g.shape
    kh, kw, cin, _ = w.shape
    gx = np.zeros((b, hp, wp, cin), dtype=g.dtype)
    gc = g.reshape(b * ho * wo, cout)
    for i in range(kh):
        for j in range(kw):
            gi = (gc @ w[i, j].T).reshape(b, ho, wo, cin)
            gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gi
    return gx


def conv2d_backward_kernel(xp, g, stride, kh, kw):
    """Gradient w.r.t. the kernel: one GEMM per kernel tap."""
    b, ho, wo, cout = g.shape
    cin = xp.shape[3]
    gc = g.reshape(b * ho * wo, cout)
    gw = np.empty((kh, kw, cin, cout), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
            gw[i, j] = np.ascontiguousarray(win).reshape(b * ho * wo, cin).T @ gc
    return gw
