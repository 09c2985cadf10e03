"""Text-pivoted collect/diffuse attention over the anchor grid.

Collect: every anchor's feature and the text feature are projected to a
shared space (leaky-relu activations, no bias), their dot product gives one
logit per anchor, and a softmax over the whole grid produces collect weights.
The weighted sum of anchor features is a single pooled vector per head.

Diffuse: a parallel projection pair produces per-anchor sigmoid gates that
scale how much of the pooled vector is written back to each anchor.  The
written-back map is added to the input and mixed by a 1x1 conv block.

Multi-head operation splits the channel axis into k parts; each head owns its
projections and sees the full text feature.  Supervision targets come from
placement IoU: a copy of the ground-truth box is centered on each grid cell
and scored by its exact rectangle IoU with the true box.
"""

import numpy as np

from . import tensor as T
from .backbone import ConvBlock


class HeadState:
    """Per-head activations kept for the attention loss and visualization."""

    __slots__ = ("collect_logits", "collect_weights", "diffuse_logits",
                 "diffuse_gates", "pooled")

    def __init__(self, collect_logits, collect_weights, diffuse_logits,
                 diffuse_gates, pooled):
        self.collect_logits = collect_logits      # (B, s*s) Tensor
        self.collect_weights = collect_weights    # (B, s*s) Tensor
        self.diffuse_logits = diffuse_logits      # (B, s*s) Tensor
        self.diffuse_gates = diffuse_gates        # (B, s*s) Tensor
        self.pooled = pooled                      # (B, m/k) Tensor


def _project_pair(rng, feat_dim, text_dim, attn_dim, dtype, trainable):
    lim_v = 1.0 / np.sqrt(feat_dim)
    lim_t = 1.0 / np.sqrt(text_dim)
    return {
        "vis": T.Tensor(rng.uniform(-lim_v, lim_v, size=(feat_dim, attn_dim)),
                        requires_grad=trainable, dtype=dtype),
        "txt": T.Tensor(rng.uniform(-lim_t, lim_t, size=(text_dim, attn_dim)),
                        requires_grad=trainable, dtype=dtype),
    }


class CollectDiffuseAttention:
    """k-head collect/diffuse unit with a residual 1x1 conv merge."""

    def __init__(self, feat_ch, text_dim, attn_dim=64, heads=2, slope=0.1,
                 seed=0, dtype=np.float32, trainable=True):
        if feat_ch % heads != 0:
            raise T.ShapeError(
                f"channel count {feat_ch} not divisible by {heads} heads")
        self.feat_ch = feat_ch
        self.heads = heads
        self.slope = slope
        head_ch = feat_ch // heads
        rng = np.random.default_rng(seed + 41)
        self.collect = [
            _project_pair(rng, head_ch, text_dim, attn_dim, dtype, trainable)
            for _ in range(heads)
        ]
        self.diffuse = [
            _project_pair(rng, head_ch, text_dim, attn_dim, dtype, trainable)
            for _ in range(heads)
        ]
        self.merge = ConvBlock(rng, feat_ch, feat_ch, 1, 1, slope, dtype,
                               trainable)

    # -- single head ------------------------------------------------------
    def _head_logits(self, pair, flat_vis, text_feat, anchors):
        """Per-anchor dot product of activated projections -> (B, anchors)."""
        batch = text_feat.shape[0]
        vis = T.leaky_relu(T.matmul(flat_vis, pair["vis"]), self.slope)
        txt = T.leaky_relu(T.matmul(text_feat, pair["txt"]), self.slope)
        vis = T.reshape(vis, (batch, anchors, vis.shape[-1]))
        txt = T.reshape(txt, (batch, 1, txt.shape[-1]))
        return T.tsum(T.mul(vis, txt), axis=2)

    def _run_head(self, idx, head_map, text_feat):
        """head_map: (B, s, s, head_ch) -> (written-back map, HeadState)."""
        batch, s = head_map.shape[0], head_map.shape[1]
        anchors = s * s
        head_ch = head_map.shape[3]
        flat = T.reshape(head_map, (batch * anchors, head_ch))

        col_logits = self._head_logits(self.collect[idx], flat, text_feat, anchors)
        col_weights = T.softmax(col_logits, axis=1)
        feats = T.reshape(head_map, (batch, anchors, head_ch))
        pooled = T.tsum(T.mul(T.reshape(col_weights, (batch, anchors, 1)), feats),
                        axis=1)

        dif_logits = self._head_logits(self.diffuse[idx], flat, text_feat, anchors)
        dif_gates = T.sigmoid(dif_logits)
        written = T.mul(T.reshape(dif_gates, (batch, anchors, 1)),
                        T.reshape(pooled, (batch, 1, head_ch)))
        written = T.reshape(written, (batch, s, s, head_ch))
        state = HeadState(col_logits, col_weights, dif_logits, dif_gates, pooled)
        return written, state

    # -- public forward ----------------------------------------------------
    def forward_single(self, feat_map, text_feat, mode):
        """Dedicated path for one head: no channel split bookkeeping at all."""
        if self.heads != 1:
            raise ValueError("forward_single requires a single-head unit")
        written, state = self._run_head(0, feat_map, text_feat)
        merged = self.merge(T.add(feat_map, written), mode)
        return merged, [state]

    def forward_multi(self, feat_map, text_feat, mode):
        """Generic path: split channels, run each head, concat, merge."""
        parts = T.split_channels(feat_map, self.heads)
        written_parts, states = [], []
        for i, part in enumerate(parts):
            written, state = self._run_head(i, part, text_feat)
            written_parts.append(written)
            states.append(state)
        attended = T.concat_channels(written_parts)
        merged = self.merge(T.add(feat_map, attended), mode)
        return merged, states

    def __call__(self, feat_map, text_feat, mode, force_generic=False):
        if self.heads == 1 and not force_generic:
            return self.forward_single(feat_map, text_feat, mode)
        return self.forward_multi(feat_map, text_feat, mode)

    def parameters(self):
        out = {}
        for i, pair in enumerate(self.collect):
            out[f"attn.collect{i}.vis"] = pair["vis"]
            out[f"attn.collect{i}.txt"] = pair["txt"]
        for i, pair in enumerate(self.diffuse):
            out[f"attn.diffuse{i}.vis"] = pair["vis"]
            out[f"attn.diffuse{i}.txt"] = pair["txt"]
        out.update(self.merge.parameters("attn.merge"))
        return out

    def buffers(self):
        return self.merge.buffers("attn.merge")


# ---------------------------------------------------------------------------
# supervision targets and loss

def placement_iou_targets(gt_box, grid):
    """Score every grid cell by centering a copy of the box there.

    ``gt_box`` is (x, y, w, h) normalized to [0, 1] with x/y the top-left
    corner.  For each of the grid*grid cells, a box of the same width and
    height is centered on the cell center and scored by exact axis-aligned
    IoU against the true box.  Returns a (grid, grid) float array in [0, 1].
    """
    x, y, w, h = (float(v) for v in gt_box)
    if w <= 0.0 or h <= 0.0:
        raise ValueError(f"degenerate box: w={w}, h={h}")
    cx, cy = x + w / 2.0, y + h / 2.0
    centers = (np.arange(grid, dtype=np.float64) + 0.5) / grid
    dx = np.abs(centers - cx)[None, :]   # column offsets
    dy = np.abs(centers - cy)[:, None]   # row offsets
    inter_w = np.maximum(w - dx, 0.0)
    inter_h = np.maximum(h - dy, 0.0)
    inter = inter_w * inter_h
    union = 2.0 * w * h - inter
    return inter / union


def attention_loss(states, targets):
    """Binary cross entropy of each head's collect logits against shared
    placement-IoU targets, summed over heads (mean over anchors within each).

    ``targets`` is a (B, s*s) array shared by all heads.
    """
    tgt = T.Tensor(np.asarray(targets, dtype=states[0].collect_logits.dtype))
    total = None
    for state in states:
        if state.collect_logits.shape != tgt.shape:
            raise T.ShapeError(
                f"logits {state.collect_logits.shape} vs targets {tgt.shape}")
        term = T.bce_with_logits(state.collect_logits, tgt)
        total = term if total is None else T.add(total, term)
    return total


def diffuse_supervision_loss(states, targets):
    """Optional twin of :func:`attention_loss` applied to the diffuse logits."""
    tgt = T.Tensor(np.asarray(targets, dtype=states[0].diffuse_logits.dtype))
    total = None
    for state in states:
        term = T.bce_with_logits(state.diffuse_logits, tgt)
        total = term if total is None else T.add(total, term)
    return total
