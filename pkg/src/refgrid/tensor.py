"""Dense tensors with taped reverse-mode automatic differentiation.

The engine is deliberately small: a :class:`Tensor` wraps a numpy array, a
:class:`Tape` records every op executed while it is active, and
:func:`backward` replays the records in reverse.  Ops are plain functions
returning new tensors; each one registers a closure that maps the output
gradient to input gradients.  Gradients accumulate additively across fan-out.

Training runs in float32.  Gradient checking builds float64 tensors instead;
every op computes in the dtype of its inputs, so the same code serves as the
64-bit shadow mode.

Set ``RGIN_DEBUG=1`` to make any op that produces a NaN or Inf raise
:class:`NumericError` instead of silently propagating it.
"""

import os
import threading

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(ArithmeticError):
    """An op produced NaN/Inf, or numerical state is otherwise degenerate."""


def _debug_enabled():
    val = os.environ.get("RGIN_DEBUG", "")
    return val not in ("", "0")


def _check_finite(name, arr):
    if _debug_enabled() and not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# tape machinery

_TLS = threading.local()


def _tape_stack():
    stack = getattr(_TLS, "stack", None)
    if stack is None:
        stack = []
        _TLS.stack = stack
    return stack


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed ops, confined to one thread.

    Use as a context manager around the forward pass; :func:`backward` then
    replays the records in reverse.  A tape supports exactly one backward
    pass.
    """

    def __init__(self):
        self._nodes = []  # (out, inputs, vjp)
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """Immutable dense array, optionally carrying a gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_tape", "_idx")

    def __init__(self, data, requires_grad=False, dtype=None):
        # float32 is the working precision; an explicit float64 ndarray is
        # preserved so whole graphs can run in a 64-bit shadow mode
        keep64 = (isinstance(data, (np.ndarray, np.generic))
                  and data.dtype == np.float64)
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not (keep64 and arr.dtype == np.float64):
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None
        self._idx = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar, all routed through the recorded op functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, ref=None):
    if isinstance(x, Tensor):
        return x
    dtype = ref.data.dtype if ref is not None else np.float32
    return Tensor(np.asarray(x, dtype=dtype))


def _on_tape(t, tape):
    return t.requires_grad or (t._tape is tape)


def _record(name, out_data, inputs, make_vjp):
    """Wrap op output; register its adjoint closure if a tape is listening.

    ``make_vjp`` is called only when recording happens; it receives a tuple of
    per-input need flags and must return ``vjp(g) -> list of grads or None``
    aligned with ``inputs``.
    """
    _check_finite(name, out_data)
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and not tape._consumed:
        needs = tuple(_on_tape(t, tape) for t in inputs)
        if any(needs):
            out._tape = tape
            out._idx = len(tape._nodes)
            tape._nodes.append((out, inputs, make_vjp(needs), name))
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad ancestor of a scalar loss."""
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise RuntimeError("loss is not recorded on a live tape")
    if tape._consumed:
        raise RuntimeError("backward already called on this tape")
    tape._consumed = True

    grads = {id(loss): np.ones_like(loss.data)}
    for out, inputs, vjp, name in reversed(tape._nodes[: loss._idx + 1]):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        in_grads = vjp(g)
        for t, ig in zip(inputs, in_grads):
            if ig is None:
                continue
            _check_finite(f"{name}.backward", ig)
            if t.requires_grad:
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)
                t.grad += ig
            if t._tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] += ig
                else:
                    grads[key] = ig.copy() if ig is g else ig


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ts) in enumerate(zip(g.shape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic

def add(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data + b.data

    def make_vjp(needs):
        def vjp(g):
            return [
                _unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None,
            ]
        return vjp

    return _record("add", out, (a, b), make_vjp)


def sub(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data - b.data

    def make_vjp(needs):
        def vjp(g):
            return [
                _unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None,
            ]
        return vjp

    return _record("sub", out, (a, b), make_vjp)


def neg(a):
    a = _as_tensor(a)
    out = -a.data

    def make_vjp(needs):
        def vjp(g):
            return [-g]
        return vjp

    return _record("neg", out, (a,), make_vjp)


def mul(a, b):
    a = _as_tensor(a, b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, a)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def make_vjp(needs):
        def vjp(g):
            return [
                _unbroadcast(g * bd, a.shape) if needs[0] else None,
                _unbroadcast(g * ad, b.shape) if needs[1] else None,
            ]
        return vjp

    return _record("mul", out, (a, b), make_vjp)


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents differ: {a.shape} vs {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def make_vjp(needs):
        def vjp(g):
            return [
                g @ bd.T if needs[0] else None,
                ad.T @ g if needs[1] else None,
            ]
        return vjp

    return _record("matmul", out, (a, b), make_vjp)


def tsum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def make_vjp(needs):
        def vjp(g):
            if axis is None:
                return [np.broadcast_to(g, shape).copy()]
            if not keepdims:
                g = np.expand_dims(g, axis)
            return [np.broadcast_to(g, shape).copy()]
        return vjp

    return _record("sum", out, (a,), make_vjp)


def tmean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a, shape):
    a = _as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}") from exc
    orig = a.shape

    def make_vjp(needs):
        def vjp(g):
            return [g.reshape(orig)]
        return vjp

    return _record("reshape", out, (a,), make_vjp)


# ---------------------------------------------------------------------------
# activations

def sigmoid(a):
    a = _as_tensor(a)
    e = np.exp(-np.abs(a.data))
    out = np.where(a.data >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def make_vjp(needs):
        def vjp(g):
            return [g * out * (1.0 - out)]
        return vjp

    return _record("sigmoid", out, (a,), make_vjp)


def tanh(a):
    a = _as_tensor(a)
    out = np.tanh(a.data)

    def make_vjp(needs):
        def vjp(g):
            return [g * (1.0 - out * out)]
        return vjp

    return _record("tanh", out, (a,), make_vjp)


def leaky_relu(a, slope=0.1):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0,1), got {slope}")
    a = _as_tensor(a)
    out = np.where(a.data >= 0, a.data, slope * a.data)
    mask = np.where(a.data >= 0, 1.0, slope).astype(a.data.dtype)

    def make_vjp(needs):
        def vjp(g):
            return [g * mask]
        return vjp

    return _record("leaky_relu", out, (a,), make_vjp)


def softmax(a, axis=-1):
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def make_vjp(needs):
        def vjp(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return [out * (g - dot)]
        return vjp

    return _record("softmax", out, (a,), make_vjp)


# ---------------------------------------------------------------------------
# losses

def bce_with_logits(logit, target):
    """Mean sigmoid binary cross entropy, computed in the stable logit form."""
    logit, target = _as_tensor(logit), _as_tensor(target)
    if logit.shape != target.shape:
        raise ShapeError(f"bce shapes differ: {logit.shape} vs {target.shape}")
    t = target.data
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ValueError("bce_with_logits targets must lie in [0, 1]")
    x = logit.data
    # max(x,0) - x*t + log(1 + exp(-|x|))
    per = np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = np.asarray(per.mean(), dtype=x.dtype)
    count = float(per.size)

    def make_vjp(needs):
        def vjp(g):
            gl = gt = None
            if needs[0]:
                e = np.exp(-np.abs(x))
                s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
                gl = g * (s - t) / count
            if needs[1]:
                gt = g * (-x) / count
            return [gl, gt]
        return vjp

    return _record("bce_with_logits", out, (logit, target), make_vjp)


def smooth_l1(pred, target):
    """Mean smooth-L1 (Huber with threshold 1) over all elements."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"smooth_l1 shapes differ: {pred.shape} vs {target.shape}")
    d = pred.data - target.data
    ad = np.abs(d)
    per = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)
    out = np.asarray(per.mean(), dtype=d.dtype)
    count = float(per.size)

    def make_vjp(needs):
        def vjp(g):
            dd = np.where(ad < 1.0, d, np.sign(d)) / count
            return [
                g * dd if needs[0] else None,
                -g * dd if needs[1] else None,
            ]
        return vjp

    return _record("smooth_l1", out, (pred, target), make_vjp)


# ---------------------------------------------------------------------------
# structural ops

def split_channels(a, k):
    """Split the last axis into k equal parts; inverse of concat_channels."""
    a = _as_tensor(a)
    m = a.shape[-1]
    if m % k != 0:
        raise ShapeError(f"cannot split {m} channels into {k} parts")
    step = m // k
    parts = []
    for i in range(k):
        lo = i * step
        piece = np.ascontiguousarray(a.data[..., lo:lo + step])
        shape = a.shape

        def make_vjp(needs, lo=lo):
            def vjp(g):
                full = np.zeros(shape, dtype=g.dtype)
                full[..., lo:lo + step] = g
                return [full]
            return vjp

        parts.append(_record("split_channels", piece, (a,), make_vjp))
    return parts


def concat_channels(parts):
    """Concatenate along the last axis; inverse of split_channels."""
    parts = [_as_tensor(p) for p in parts]
    out = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.shape[-1] for p in parts]

    def make_vjp(needs):
        def vjp(g):
            grads, lo = [], 0
            for w, need in zip(widths, needs):
                grads.append(np.ascontiguousarray(g[..., lo:lo + w]) if need else None)
                lo += w
            return grads
        return vjp

    return _record("concat_channels", out, tuple(parts), make_vjp)


def gather_rows(table, ids):
    """Row lookup table[ids] for an integer id array; embedding primitive."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("gather_rows ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"id outside table of {table.shape[0]} rows")
    out = table.data[ids]
    shape = table.shape

    def make_vjp(needs):
        def vjp(g):
            gt = np.zeros(shape, dtype=g.dtype)
            np.add.at(gt, ids, g)
            return [gt]
        return vjp

    return _record("gather_rows", out, (table,), make_vjp)


def take_flat(a, flat_idx):
    """Gather elements by flat (row-major) index into a 1-D tensor."""
    a = _as_tensor(a)
    flat_idx = np.asarray(flat_idx)
    if not np.issubdtype(flat_idx.dtype, np.integer):
        raise TypeError("take_flat indices must be integers")
    if flat_idx.size and (flat_idx.min() < 0 or flat_idx.max() >= a.size):
        raise IndexError(f"flat index outside tensor of {a.size} elements")
    out = a.data.reshape(-1)[flat_idx]
    shape, size = a.shape, a.size

    def make_vjp(needs):
        def vjp(g):
            ga = np.zeros(size, dtype=g.dtype)
            np.add.at(ga, flat_idx, g)
            return [ga.reshape(shape)]
        return vjp

    return _record("take_flat", out, (a,), make_vjp)


# ---------------------------------------------------------------------------
# convolution

def _conv_pad(h, w, kh, kw, stride, padding):
    """Output extents plus per-side padding for 'same'/'valid' policies."""
    if padding == "valid":
        oh = (h - kh) // stride + 1
        ow = (w - kw) // stride + 1
        return oh, ow, 0, 0, 0, 0
    if padding == "same":
        oh = -(-h // stride)
        ow = -(-w // stride)
        ph = max((oh - 1) * stride + kh - h, 0)
        pw = max((ow - 1) * stride + kw - w, 0)
        return oh, ow, ph // 2, ph - ph // 2, pw // 2, pw - pw // 2
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def conv2d(x, w, stride=1, padding="valid"):
    """Strided 2-D cross-correlation over channels-last input.

    ``x`` is (H, W, C_in) or batched (B, H, W, C_in); ``w`` is
    (kh, kw, C_in, C_out).  Output extents: ``valid`` gives
    floor((H-kh)/stride)+1, ``same`` gives ceil(H/stride) with zero padding
    split low/high (extra pixel on the bottom/right).  No bias; add one as a
    separate broadcast term when needed.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim == 3:
        batched = _conv2d_batched(reshape(x, (1,) + x.shape), w, stride, padding)
        return reshape(batched, batched.shape[1:])
    return _conv2d_batched(x, w, stride, padding)


def _conv2d_batched(x, w, stride, padding):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d needs (B,H,W,Cin) and (kh,kw,Cin,Cout), got {x.shape}, {w.shape}")
    if not isinstance(stride, int) or stride <= 0:
        raise ValueError(f"conv2d stride must be a positive int, got {stride}")
    b, h, wd, cin = x.shape
    kh, kw, wcin, cout = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {wcin}")
    oh, ow, pt, pb, pl, pr = _conv_pad(h, wd, kh, kw, stride, padding)
    if kh > h + pt + pb or kw > wd + pl + pr:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + pt + pb}x{wd + pl + pr}")

    if pt or pb or pl or pr:
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    else:
        xp = x.data
    out = backend.conv2d_forward(xp, w.data, stride)
    hp, wp = xp.shape[1], xp.shape[2]
    wdata = w.data

    def make_vjp(needs):
        def vjp(g):
            g = np.ascontiguousarray(g)
            gx = gw = None
            if needs[0]:
                gxp = backend.conv2d_backward_input(g, wdata, stride, hp, wp)
                gx = gxp[:, pt:hp - pb, pl:wp - pr] if (pt or pb or pl or pr) else gxp
                gx = np.ascontiguousarray(gx)
            if needs[1]:
                gw = backend.conv2d_backward_kernel(xp, g, stride, kh, kw)
            return [gx, gw]
        return vjp

    return _record("conv2d", out, (x, w), make_vjp)


# ---------------------------------------------------------------------------
# batch normalization

def batch_norm(x, gamma, beta, running_mean, running_var, mode,
               eps=1e-5, momentum=0.1):
    """Per-channel normalization over all non-channel axes (channels last).

    Train mode normalizes with biased batch statistics and updates the
    running buffers in place: ``running = (1-momentum)*running + momentum*stat``.
    Eval mode consumes the buffers.  ``gamma``/``beta`` are learned affine
    tensors of shape (C,); the running buffers are plain float arrays.
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if mode not in ("train", "eval"):
        raise ValueError(f"batch_norm mode must be 'train' or 'eval', got {mode!r}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"affine params must have shape ({c},)")
    axes = tuple(range(x.ndim - 1))

    if mode == "train":
        if x.shape[0] < 2:
            raise NumericError("batch_norm train mode needs batch size >= 2")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)  # biased
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mean
        running_var[...] = (1.0 - momentum) * running_var + momentum * var
    else:
        mean = np.asarray(running_mean, dtype=x.data.dtype)
        var = np.asarray(running_var, dtype=x.data.dtype)

    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv
    out = gamma.data * xhat + beta.data
    gdata = gamma.data

    def make_vjp(needs):
        def vjp(g):
            gx = gg = gb = None
            if needs[1]:
                gg = (g * xhat).sum(axis=axes)
            if needs[2]:
                gb = g.sum(axis=axes)
            if needs[0]:
                if mode == "train":
                    gh = g * gdata
                    gx = inv * (gh - gh.mean(axis=axes) - xhat * (gh * xhat).mean(axis=axes))
                else:
                    gx = g * (gdata * inv)
            return [gx, gg, gb]
        return vjp

    return _record("batch_norm", out, (x, gamma, beta), make_vjp)
