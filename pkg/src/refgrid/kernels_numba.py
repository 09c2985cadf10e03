"""Numba-compiled convolution kernels.

Same contracts as :mod:`refgrid.kernels`.  Each output element is written by
exactly one loop iteration, so results are deterministic run to run.  The
innermost loops run over the contiguous channel axis so LLVM can vectorize
them.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward(xp, w, stride):
    bsz, hp, wp, cin = xp.shape
    kh, kw, _, cout = w.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    out = np.zeros((bsz, ho, wo, cout), dtype=xp.dtype)
    for n in range(bsz):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                acc = out[n, oh, ow]
                for i in range(kh):
                    for j in range(kw):
                        for ci in range(cin):
                            v = xp[n, ih0 + i, iw0 + j, ci]
                            for co in range(cout):
                                acc[co] += v * w[i, j, ci, co]
    return out


@njit(cache=True, fastmath=True)
def conv2d_backward_input(g, w, stride, hp, wp):
    bsz, ho, wo, cout = g.shape
    kh, kw, cin, _ = w.shape
    gx = np.zeros((bsz, hp, wp, cin), dtype=g.dtype)
    for n in range(bsz):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                go = g[n, oh, ow]
                for i in range(kh):
                    for j in range(kw):
                        row = gx[n, ih0 + i, iw0 + j]
                        for ci in range(cin):
                            acc = row[ci]
                            for co in range(cout):
                                acc += go[co] * w[i, j, ci, co]
                            row[ci] = acc
    return gx


@njit(cache=True, fastmath=True)
def conv2d_backward_kernel(xp, g, stride, kh, kw):
    bsz, ho, wo, cout = g.shape
    cin = xp.shape[3]
    gw = np.zeros((kh, kw, cin, cout), dtype=g.dtype)
    for n in range(bsz):
        for oh in range(ho):
            ih0 = oh * stride
            for ow in range(wo):
                iw0 = ow * stride
                go = g[n, oh, ow]
                for i in range(kh):
                    for j in range(kw):
                        for ci in range(cin):
                            v = xp[n, ih0 + i, iw0 + j, ci]
                            row = gw[i, j, ci]
                            for co in range(cout):
                                row[co] += v * go[co]
    return gw
