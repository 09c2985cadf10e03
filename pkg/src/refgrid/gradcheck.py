"""Finite-difference verification of every differentiable operation.

Each registered case builds a scalar objective around exactly one op, runs
the taped backward pass, and compares every input gradient against central
finite differences in 64-bit shadow mode (float64 tensors flow through the
same code paths as float32 ones).  A final case differentiates the complete
grounding loss of a toy model — grid 2x2, 8 fused channels, 2 attention
heads, 1 box prior — through a coordinate subsample of all parameters.

Ops are looked up on the tensor module at call time, so a test can swap in a
deliberately wrong adjoint and confirm the check flags it.
"""

import time

import numpy as np

from . import tensor as T

STEP = 1e-4
TOLERANCE = 1e-4


def _rel_err(analytic, numeric):
    diff = float(np.abs(analytic - numeric).max())
    scale = max(float(np.abs(numeric).max()), float(np.abs(analytic).max()), 1e-3)
    return diff / scale


def _weighted_sum(out, rng=None):
    # fixed-seed weights: every evaluation of a case must see the same mix
    w_rng = np.random.default_rng(99)
    w = T.Tensor(w_rng.uniform(0.5, 1.5, size=out.data.shape))
    return T.tsum(T.mul(out, w))


def _away_from(rng, shape, gap=0.05, span=1.0):
    """Values of random sign with magnitude in [gap, gap+span] (kink-safe)."""
    mag = rng.uniform(gap, gap + span, size=shape)
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return mag * sign


def check_case(builder, seed=0, step=STEP):
    """Max relative error across all inputs of one registered case."""
    rng = np.random.default_rng(seed)
    fn, arrays = builder(rng)
    tensors = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with T.Tape():
        out = fn(*tensors)
        T.backward(out)

    def value(arrs):
        return float(fn(*[T.Tensor(a) for a in arrs]).data)

    worst = 0.0
    work = [a.copy() for a in arrays]
    for i, t in enumerate(tensors):
        analytic = np.zeros_like(arrays[i]) if t.grad is None else t.grad
        numeric = np.zeros_like(arrays[i])
        flat_n = numeric.reshape(-1)
        flat_w = work[i].reshape(-1)
        for j in range(flat_w.size):
            orig = flat_w[j]
            flat_w[j] = orig + step
            hi = value(work)
            flat_w[j] = orig - step
            lo = value(work)
            flat_w[j] = orig
            flat_n[j] = (hi - lo) / (2.0 * step)
        worst = max(worst, _rel_err(analytic, numeric))
    return worst


# --- one case per differentiable op -----------------------------------------

def _case_add(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    return (lambda a, b: _weighted_sum(T.add(a, b), rng)), [a, b]


def _case_sub(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 1))
    return (lambda a, b: _weighted_sum(T.sub(a, b), rng)), [a, b]


def _case_neg(rng):
    a = rng.standard_normal((2, 5))
    return (lambda a: _weighted_sum(T.neg(a), rng)), [a]


def _case_mul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4,))
    return (lambda a, b: _weighted_sum(T.mul(a, b), rng)), [a, b]


def _case_matmul(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    return (lambda a, b: _weighted_sum(T.matmul(a, b), rng)), [a, b]


def _case_sum(rng):
    a = rng.standard_normal((3, 4, 2))
    return (lambda a: _weighted_sum(T.tsum(a, axis=1, keepdims=True), rng)), [a]


def _case_mean(rng):
    a = rng.standard_normal((3, 4))
    return (lambda a: _weighted_sum(T.tmean(a, axis=0), rng)), [a]


def _case_reshape(rng):
    a = rng.standard_normal((3, 4))
    return (lambda a: _weighted_sum(T.reshape(a, (2, 6)), rng)), [a]


def _case_sigmoid(rng):
    a = rng.standard_normal((3, 4)) * 2.0
    return (lambda a: _weighted_sum(T.sigmoid(a), rng)), [a]


def _case_tanh(rng):
    a = rng.standard_normal((3, 4))
    return (lambda a: _weighted_sum(T.tanh(a), rng)), [a]


def _case_leaky_relu(rng):
    a = _away_from(rng, (3, 4))
    return (lambda a: _weighted_sum(T.leaky_relu(a, 0.1), rng)), [a]


def _case_softmax(rng):
    a = rng.standard_normal((3, 5))
    return (lambda a: _weighted_sum(T.softmax(a, axis=1), rng)), [a]


def _case_conv2d(rng):
    x = rng.standard_normal((2, 5, 5, 3))
    w = rng.standard_normal((3, 3, 3, 2)) * 0.5
    return (lambda x, w: _weighted_sum(
        T.conv2d(x, w, stride=2, padding="same"), rng)), [x, w]


def _case_batch_norm(rng):
    x = rng.standard_normal((4, 3, 3, 2)) * 1.5 + 0.3
    gamma = rng.uniform(0.5, 1.5, size=(2,))
    beta = rng.standard_normal((2,)) * 0.2
    rm = np.zeros(2)
    rv = np.ones(2)

    def fn(x, gamma, beta):
        out = T.batch_norm(x, gamma, beta, rm, rv, mode="train")
        return _weighted_sum(out, rng)
    return fn, [x, gamma, beta]


def _case_bce_with_logits(rng):
    logit = rng.standard_normal((3, 4)) * 2.0
    target = rng.uniform(0.1, 0.9, size=(3, 4))
    return (lambda logit, target: T.bce_with_logits(logit, target)), [logit, target]


def _case_smooth_l1(rng):
    # differences land in (0.2, 0.8) or (1.2, 1.8): both branches, no kinks
    target = rng.standard_normal((3, 4))
    inner = _away_from(rng, (3, 4), gap=0.2, span=0.6)
    outer = _away_from(rng, (3, 4), gap=1.2, span=0.6)
    pred = target + np.where(rng.uniform(size=(3, 4)) < 0.5, inner, outer)
    return (lambda pred, target: T.smooth_l1(pred, target)), [pred, target]


def _case_split_channels(rng):
    x = rng.standard_normal((2, 2, 2, 6))
    ws = [T.Tensor(rng.uniform(0.5, 1.5, size=(2, 2, 2, 2)) * (i + 1))
          for i in range(3)]

    def fn(x):
        parts = T.split_channels(x, 3)
        total = T.tsum(T.mul(parts[0], ws[0]))
        for p, w in zip(parts[1:], ws[1:]):
            total = T.add(total, T.tsum(T.mul(p, w)))
        return total
    return fn, [x]


def _case_concat_channels(rng):
    parts = [rng.standard_normal((2, 2, 2, 2)) for _ in range(3)]
    return (lambda *parts: _weighted_sum(T.concat_channels(list(parts)), rng)), parts


def _case_gather_rows(rng):
    table = rng.standard_normal((5, 3))
    ids = np.array([0, 2, 2, 4, 1])
    return (lambda table: _weighted_sum(T.gather_rows(table, ids), rng)), [table]


def _case_take_flat(rng):
    a = rng.standard_normal((4, 5))
    idx = np.array([0, 7, 7, 19, 3])
    return (lambda a: _weighted_sum(T.take_flat(a, idx), rng)), [a]


CASES = (
    ("add", _case_add),
    ("sub", _case_sub),
    ("neg", _case_neg),
    ("mul", _case_mul),
    ("matmul", _case_matmul),
    ("sum", _case_sum),
    ("mean", _case_mean),
    ("reshape", _case_reshape),
    ("sigmoid", _case_sigmoid),
    ("tanh", _case_tanh),
    ("leaky_relu", _case_leaky_relu),
    ("softmax", _case_softmax),
    ("conv2d", _case_conv2d),
    ("batch_norm", _case_batch_norm),
    ("bce_with_logits", _case_bce_with_logits),
    ("smooth_l1", _case_smooth_l1),
    ("split_channels", _case_split_channels),
    ("concat_channels", _case_concat_channels),
    ("gather_rows", _case_gather_rows),
    ("take_flat", _case_take_flat),
)


# --- end-to-end loss over a toy model ----------------------------------------

def toy_config():
    from .config import RunConfig
    # seed picked so no sampled coordinate straddles a leaky-relu kink, where
    # central differences are not a valid derivative estimate
    return RunConfig(
        image_size=32, channels=(3, 4, 5, 5), feat_ch=8, fused_dim=8,
        text_dim=8, embed_dim=5, attn_dim=4, heads=2, num_priors=1,
        batch_size=2, n_train=8, n_val=4, n_test=4, seed=11,
    ).validate()


def check_end_to_end(seed=7, step=STEP, coords_per_tensor=3):
    """FD-check the full training loss through a parameter subsample."""
    from .data import build_vocabulary
    from .model import GroundingModel
    from .text import tokenize

    cfg = toy_config()
    vocab = build_vocabulary()
    priors = np.array([[0.8, 0.9]])
    model = GroundingModel(cfg, len(vocab), priors, dtype=np.float64)

    rng = np.random.default_rng(seed)
    images = rng.uniform(0.0, 1.0, size=(2, 32, 32, 3))
    seqs = [tokenize("the red circle", vocab),
            tokenize("the square above the blue circle", vocab)]
    # box centers sit safely inside their cells (offsets far from 0/1)
    boxes = np.array([[0.20, 0.30, 0.25, 0.20],
                      [0.55, 0.15, 0.30, 0.35]])

    def loss_value():
        out, _ = model.loss(images, seqs, boxes, mode="train")
        return float(out.data)

    params = model.trainable_parameters()
    with T.Tape():
        loss, _ = model.loss(images, seqs, boxes, mode="train")
        T.backward(loss)
    grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
             for name, p in params.items()}

    worst = 0.0
    worst_name = ""
    for name, p in params.items():
        flat = p.data.reshape(-1)
        count = min(coords_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        numeric = np.zeros(count)
        for k, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + step
            hi = loss_value()
            flat[j] = orig - step
            lo = loss_value()
            flat[j] = orig
            numeric[k] = (hi - lo) / (2.0 * step)
        analytic = grads[name].reshape(-1)[idx]
        err = _rel_err(analytic, numeric)
        if err > worst:
            worst, worst_name = err, name
    return worst, worst_name


def run_gradcheck(progress=print, seed=0):
    """Run every case plus the end-to-end loss; returns (rows, all_ok)."""
    rows = []
    all_ok = True
    for name, builder in CASES:
        t0 = time.time()
        err = check_case(builder, seed=seed)
        ok = err < TOLERANCE
        all_ok = all_ok and ok
        rows.append((name, err, ok))
        progress(f"{name:18s} max rel err {err:.3e}  "
                 f"{'ok' if ok else 'FAIL'} ({time.time() - t0:.2f}s)")
    t0 = time.time()
    err, worst_name = check_end_to_end()
    ok = err < TOLERANCE
    all_ok = all_ok and ok
    rows.append(("end_to_end_loss", err, ok))
    progress(f"{'end_to_end_loss':18s} max rel err {err:.3e}  "
             f"{'ok' if ok else 'FAIL'} ({time.time() - t0:.2f}s, "
             f"worst tensor: {worst_name or 'n/a'})")
    return rows, all_ok
