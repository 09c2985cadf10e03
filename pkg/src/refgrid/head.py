"""Multimodal fusion, anchor-grid box regression, and the detection loss.

Fusion multiplies activated projections of the visual map and the (broadcast)
text feature.  A 1x1 linear conv then predicts, per grid cell and per shape
prior, the 5-tuple (t_x, t_y, t_w, t_h, t_c).  Boxes decode as

    b_x = sigmoid(t_x) + cell_col        b_w = prior_w * exp(t_w)
    b_y = sigmoid(t_y) + cell_row        b_h = prior_h * exp(t_h)

in grid units, with confidence sigmoid(t_c).  Training targets invert the
same mapping; an entry is responsible for the ground truth when a prior-shape
box centered on its cell overlaps the truth with IoU > 0.5, and the single
best entry is always responsible so no sample is unsupervised.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T

EXP_CLAMP = 8.0
OFFSET_CLAMP = 0.01


class MultimodalFusion:
    """Elementwise product of activated projections; text side broadcast."""

    def __init__(self, feat_ch, text_dim, fused_dim=128, slope=0.1, seed=0,
                 dtype=np.float32, trainable=True):
        rng = np.random.default_rng(seed + 53)
        lim_v = 1.0 / np.sqrt(feat_ch)
        lim_t = 1.0 / np.sqrt(text_dim)
        self.vis_weight = T.Tensor(
            rng.uniform(-lim_v, lim_v, size=(feat_ch, fused_dim)),
            requires_grad=trainable, dtype=dtype)
        self.txt_weight = T.Tensor(
            rng.uniform(-lim_t, lim_t, size=(text_dim, fused_dim)),
            requires_grad=trainable, dtype=dtype)
        self.fused_dim = fused_dim
        self.slope = slope

    def __call__(self, feat_map, text_feat):
        batch, s = feat_map.shape[0], feat_map.shape[1]
        flat = T.reshape(feat_map, (batch * s * s, feat_map.shape[3]))
        vis = T.leaky_relu(T.matmul(flat, self.vis_weight), self.slope)
        vis = T.reshape(vis, (batch, s, s, self.fused_dim))
        txt = T.leaky_relu(T.matmul(text_feat, self.txt_weight), self.slope)
        txt = T.reshape(txt, (batch, 1, 1, self.fused_dim))
        return T.mul(vis, txt)

    def parameters(self):
        return {"fuse.vis_weight": self.vis_weight,
                "fuse.txt_weight": self.txt_weight}


class BoxHead:
    """1x1 linear conv (with bias, no activation) to (N*5) channels."""

    def __init__(self, fused_dim, num_priors=3, seed=0, dtype=np.float32,
                 trainable=True):
        rng = np.random.default_rng(seed + 67)
        out_ch = num_priors * 5
        lim = 1.0 / np.sqrt(fused_dim)
        self.kernel = T.Tensor(
            rng.uniform(-lim, lim, size=(1, 1, fused_dim, out_ch)),
            requires_grad=trainable, dtype=dtype)
        self.bias = T.Tensor(np.zeros(out_ch), requires_grad=trainable,
                             dtype=dtype)
        self.num_priors = num_priors

    def __call__(self, fused):
        return T.add(T.conv2d(fused, self.kernel, stride=1, padding="valid"),
                     self.bias)

    def parameters(self):
        return {"box.kernel": self.kernel, "box.bias": self.bias}


# ---------------------------------------------------------------------------
# geometry

def iou_center(a, b):
    """Exact IoU of axis-aligned boxes in (cx, cy, w, h) format.

    Accepts broadcastable stacks with the box on the last axis.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if np.any(a[..., 2:] <= 0) or np.any(b[..., 2:] <= 0):
        raise ValueError("degenerate box: nonpositive width or height")
    ax1, ay1 = a[..., 0] - a[..., 2] / 2, a[..., 1] - a[..., 3] / 2
    ax2, ay2 = a[..., 0] + a[..., 2] / 2, a[..., 1] + a[..., 3] / 2
    bx1, by1 = b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2
    bx2, by2 = b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2
    iw = np.maximum(np.minimum(ax2, bx2) - np.maximum(ax1, bx1), 0.0)
    ih = np.maximum(np.minimum(ay2, by2) - np.maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def topleft_to_center(box):
    """(x, y, w, h) with top-left corner -> (cx, cy, w, h)."""
    box = np.asarray(box, dtype=np.float64)
    out = box.copy()
    out[..., 0] = box[..., 0] + box[..., 2] / 2
    out[..., 1] = box[..., 1] + box[..., 3] / 2
    return out


def center_to_topleft(box):
    box = np.asarray(box, dtype=np.float64)
    out = box.copy()
    out[..., 0] = box[..., 0] - box[..., 2] / 2
    out[..., 1] = box[..., 1] - box[..., 3] / 2
    return out


# ---------------------------------------------------------------------------
# decode and target assignment

def decode_boxes(raw, priors):
    """Raw logits (..., s, s, N*5) -> decoded boxes in grid units.

    Returns (boxes, conf): boxes (..., s, s, N, 4) as (cx, cy, w, h) where a
    cell spans one unit, conf (..., s, s, N).  |t_w| and |t_h| are clamped to
    8 before exponentiation, with a warning, to keep the decode finite.
    """
    raw = np.asarray(raw, dtype=np.float64)
    priors = np.asarray(priors, dtype=np.float64)
    num_priors = priors.shape[0]
    s = raw.shape[-3]
    if raw.shape[-2] != s or raw.shape[-1] != num_priors * 5:
        raise T.ShapeError(
            f"raw grid {raw.shape} does not match {num_priors} priors")
    t = raw.reshape(raw.shape[:-1] + (num_priors, 5))
    twh = t[..., 2:4]
    if np.any(np.abs(twh) > EXP_CLAMP):
        warnings.warn("size logits clamped to +/-8 before exp", stacklevel=2)
        twh = np.clip(twh, -EXP_CLAMP, EXP_CLAMP)
    cols = np.arange(s, dtype=np.float64)[None, :, None]
    rows = np.arange(s, dtype=np.float64)[:, None, None]
    bx = _sigmoid(t[..., 0]) + cols
    by = _sigmoid(t[..., 1]) + rows
    bw = priors[:, 0] * np.exp(twh[..., 0])
    bh = priors[:, 1] * np.exp(twh[..., 1])
    conf = _sigmoid(t[..., 4])
    return np.stack([bx, by, bw, bh], axis=-1), conf


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class TargetAssignment:
    """Responsibility mask and regression targets for one sample."""

    grid: int
    conf: np.ndarray          # (s, s, N) float 0/1 responsibility
    sig_x: np.ndarray         # (s, s, N) sigmoid-space x offset targets
    sig_y: np.ndarray         # (s, s, N) sigmoid-space y offset targets
    t_w: np.ndarray           # (s, s, N) log width-ratio targets
    t_h: np.ndarray           # (s, s, N) log height-ratio targets
    positives: np.ndarray     # (P, 3) int (row, col, prior) indices
    best: tuple               # (row, col, prior) of the highest-IoU entry

    def logit_targets(self, entry=None):
        """Eq.-inverting raw targets (t_x, t_y, t_w, t_h) for one entry."""
        i, j, q = entry if entry is not None else self.best
        return np.array([
            _logit(self.sig_x[i, j, q]),
            _logit(self.sig_y[i, j, q]),
            self.t_w[i, j, q],
            self.t_h[i, j, q],
        ])


def assign_targets(gt_box, priors, grid, iou_threshold=0.5):
    """Match a normalized top-left (x, y, w, h) truth box to grid entries.

    Prior-shape boxes centered on every cell are scored by IoU against the
    truth; entries above the threshold are responsible, and the best prior
    of the cell containing the truth center is always responsible.  That
    cell is the only one whose sigmoid-space offsets can represent the
    center exactly (no other cell scores higher for a given prior, so this
    also serves as the tie-break when a wide prior swallows the truth box at
    several adjacent cells).  Offset targets are clamped to [0.01, 0.99] so
    their logits stay finite.
    """
    x, y, w, h = (float(v) for v in gt_box)
    if w <= 0 or h <= 0:
        raise ValueError(f"degenerate box: w={w}, h={h}")
    priors = np.asarray(priors, dtype=np.float64)
    num_priors = priors.shape[0]
    gx, gy = (x + w / 2) * grid, (y + h / 2) * grid
    gw, gh = w * grid, h * grid
    if not (0.0 <= gx <= grid and 0.0 <= gy <= grid):
        raise ValueError(f"box center ({gx}, {gy}) outside the {grid}x{grid} grid")

    centers = np.arange(grid, dtype=np.float64) + 0.5
    cell_boxes = np.zeros((grid, grid, num_priors, 4))
    cell_boxes[..., 0] = centers[None, :, None]
    cell_boxes[..., 1] = centers[:, None, None]
    cell_boxes[..., 2] = priors[:, 0]
    cell_boxes[..., 3] = priors[:, 1]
    scores = iou_center(cell_boxes, np.array([gx, gy, gw, gh]))

    mask = scores > iou_threshold
    home = (min(int(gy), grid - 1), min(int(gx), grid - 1))
    best = (*home, int(np.argmax(scores[home])))
    mask[best] = True

    sig_x = np.zeros_like(scores)
    sig_y = np.zeros_like(scores)
    t_w = np.zeros_like(scores)
    t_h = np.zeros_like(scores)
    pos = np.argwhere(mask)
    for i, j, q in pos:
        sig_x[i, j, q] = np.clip(gx - j, OFFSET_CLAMP, 1.0 - OFFSET_CLAMP)
        sig_y[i, j, q] = np.clip(gy - i, OFFSET_CLAMP, 1.0 - OFFSET_CLAMP)
        t_w[i, j, q] = np.log(gw / priors[q, 0])
        t_h[i, j, q] = np.log(gh / priors[q, 1])
    return TargetAssignment(grid, mask.astype(np.float64), sig_x, sig_y,
                            t_w, t_h, pos, tuple(int(v) for v in best))


# ---------------------------------------------------------------------------
# losses and selection

def detection_loss(raw, assignments, neg_conf_weight=1.0):
    """Box regression plus confidence loss over a batch of assignments.

    ``raw`` is the (B, s, s, N*5) head output.  The box term applies only to
    responsible entries: binary cross entropy for the x/y offsets against
    sigmoid-space targets, smooth-L1 for the log size ratios.  The confidence
    term covers every entry against the 0/1 responsibility mask.  Each term
    is mean-reduced over its own elements.
    """
    batch, s = raw.shape[0], raw.shape[1]
    num_entries = s * s * (raw.shape[3] // 5)
    flat = T.reshape(raw, (batch, num_entries, 5))
    tx, ty, tw, th, tc = [T.reshape(c, (batch, num_entries))
                          for c in T.split_channels(flat, 5)]

    pos_idx, sx_t, sy_t, tw_t, th_t = [], [], [], [], []
    conf_t = np.zeros((batch, num_entries), dtype=np.float64)
    for b, asg in enumerate(assignments):
        n = asg.conf.shape[2]
        conf_t[b] = asg.conf.reshape(-1)
        for i, j, q in asg.positives:
            pos_idx.append(b * num_entries + (i * s + j) * n + q)
            sx_t.append(asg.sig_x[i, j, q])
            sy_t.append(asg.sig_y[i, j, q])
            tw_t.append(asg.t_w[i, j, q])
            th_t.append(asg.t_h[i, j, q])
    if not pos_idx:
        raise ValueError("no responsible entries in the batch")
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    dt = raw.dtype

    def const(v):
        return T.Tensor(np.asarray(v, dtype=dt))

    loss_xy = T.add(
        T.bce_with_logits(T.take_flat(tx, pos_idx), const(sx_t)),
        T.bce_with_logits(T.take_flat(ty, pos_idx), const(sy_t)))
    loss_wh = T.add(
        T.smooth_l1(T.take_flat(tw, pos_idx), const(tw_t)),
        T.smooth_l1(T.take_flat(th, pos_idx), const(th_t)))

    if neg_conf_weight == 1.0:
        loss_conf = T.bce_with_logits(tc, const(conf_t))
    else:
        flat_conf = conf_t.reshape(-1)
        neg_idx = np.flatnonzero(flat_conf == 0.0)
        n_pos, n_neg = pos_idx.size, neg_idx.size
        terms = T.mul(T.bce_with_logits(T.take_flat(tc, pos_idx),
                                        const(np.ones(n_pos))), float(n_pos))
        if n_neg:
            neg = T.mul(T.bce_with_logits(T.take_flat(tc, neg_idx),
                                          const(np.zeros(n_neg))),
                        neg_conf_weight * float(n_neg))
            terms = T.add(terms, neg)
        loss_conf = T.mul(terms, 1.0 / (n_pos + neg_conf_weight * n_neg))

    total = T.add(T.add(loss_xy, loss_wh), loss_conf)
    parts = {"box_xy": loss_xy.item(), "box_wh": loss_wh.item(),
             "conf": loss_conf.item()}
    return total, parts


def total_loss(det, att, lam):
    """det + lam * att; the attention term drops out when lam is 0 or att
    is absent (it may still be computed and reported)."""
    if lam < 0:
        raise ValueError(f"attention weight must be >= 0, got {lam}")
    if att is None or lam == 0.0:
        return det
    return T.add(det, T.mul(att, float(lam)))


def select_prediction(conf):
    """Index of the most confident entry; ties break toward the smaller
    (row, col, prior) in lexicographic order."""
    conf = np.asarray(conf)
    if conf.size == 0:
        raise ValueError("empty confidence grid")
    return np.unravel_index(np.argmax(conf), conf.shape)


def predict_best_box(raw_sample, priors):
    """Decode one sample's raw grid and return (box, confidence, entry).

    The box comes back normalized to [0, 1] in top-left (x, y, w, h) form.
    """
    boxes, conf = decode_boxes(raw_sample, priors)
    i, j, q = select_prediction(conf)
    grid = conf.shape[0]
    cx, cy, w, h = boxes[i, j, q]
    norm = np.array([cx / grid, cy / grid, w / grid, h / grid])
    return center_to_topleft(norm), float(conf[i, j, q]), (i, j, q)
