"""The full grounding model: backbone, text encoder, fusion, attention, head.

Ablation switches:

* ``enable_scale_fusion`` off: only the coarsest projected map feeds the head.
* ``enable_attention`` off: the collect/diffuse unit is skipped entirely.
* ``enable_att_loss`` off: the attention supervision term is reported but not
  added to the training objective.
* ``freeze_backbone``: backbone and projector parameters are created without
  gradients and excluded from the optimizer.
"""

import numpy as np

from . import tensor as T
from . import head as H
from .attention import (CollectDiffuseAttention, attention_loss,
                        diffuse_supervision_loss, placement_iou_targets)
from .backbone import MultiScaleBackbone, ScaleProjector
from .scale_fusion import ScaleFusion
from .text import TextEncoder


class GroundingModel:
    """One-stage referring-expression grounding over an anchor grid."""

    def __init__(self, cfg, vocab_size, priors, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.grid = cfg.image_size // 16
        self.priors = np.asarray(priors, dtype=np.float64)  # (N, 2) grid units
        if self.priors.shape != (cfg.num_priors, 2):
            raise T.ShapeError(
                f"expected {cfg.num_priors} priors, got {self.priors.shape}")
        seed = cfg.seed
        train_bb = not cfg.freeze_backbone
        self.backbone = MultiScaleBackbone(
            cfg.image_size, cfg.channels, cfg.leaky_slope, seed, dtype,
            trainable=train_bb)
        self.projector = ScaleProjector(
            cfg.channels, cfg.feat_ch, cfg.leaky_slope, seed, dtype,
            trainable=train_bb)
        self.text = TextEncoder(vocab_size, cfg.embed_dim, cfg.text_dim,
                                seed + 101, dtype)
        self.scale_fusion = ScaleFusion(cfg.text_dim, 3, seed, dtype)
        self.attention = CollectDiffuseAttention(
            cfg.feat_ch, cfg.text_dim, cfg.attn_dim, cfg.heads,
            cfg.leaky_slope, seed, dtype)
        self.fusion = H.MultimodalFusion(cfg.feat_ch, cfg.text_dim,
                                         cfg.fused_dim, cfg.leaky_slope,
                                         seed, dtype)
        self.box_head = H.BoxHead(cfg.fused_dim, cfg.num_priors, seed, dtype)

    # -- registries ---------------------------------------------------------
    def parameters(self):
        out = {}
        out.update(self.backbone.parameters())
        out.update(self.projector.parameters())
        out.update(self.text.parameters())
        out.update(self.scale_fusion.parameters())
        out.update(self.attention.parameters())
        out.update(self.fusion.parameters())
        out.update(self.box_head.parameters())
        return out

    def trainable_parameters(self):
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def buffers(self):
        out = {}
        out.update(self.backbone.buffers())
        out.update(self.projector.buffers())
        out.update(self.attention.buffers())
        return out

    # -- forward ------------------------------------------------------------
    def forward(self, images, sequences, mode, force_generic_attention=False):
        """images (B, H, H, 3) array, sequences list of TokenSequence.

        Returns a dict with the raw box grid plus the intermediate pieces
        needed for losses and visualization.
        """
        img = T.Tensor(np.asarray(images), dtype=self.dtype)
        text_feat = self.text.encode_batch(sequences)

        fine, mid, coarse = self.backbone.extract(img, mode)
        p1, p2, p3 = self.projector.project(fine, mid, coarse, mode)
        if self.cfg.enable_scale_fusion:
            beta = self.scale_fusion.predict_weights(text_feat)
            feat = self.scale_fusion.fuse([p1, p2, p3], beta)
        else:
            beta = None
            feat = p3

        if self.cfg.enable_attention:
            feat, states = self.attention(feat, text_feat, mode,
                                          force_generic_attention)
        else:
            states = None

        fused = self.fusion(feat, text_feat)
        raw = self.box_head(fused)
        return {"raw": raw, "states": states, "beta": beta,
                "text_feat": text_feat, "feat": feat}

    # -- training loss ------------------------------------------------------
    def loss(self, images, sequences, gt_boxes, mode="train"):
        """Composite objective for a batch; gt_boxes is (B, 4) normalized
        top-left. Returns (loss Tensor, parts dict of floats)."""
        out = self.forward(images, sequences, mode)
        assignments = [H.assign_targets(b, self.priors, self.grid)
                       for b in gt_boxes]
        det, parts = H.detection_loss(out["raw"], assignments,
                                      self.cfg.neg_conf_weight)
        att = None
        if self.cfg.enable_attention:
            targets = np.stack([
                placement_iou_targets(b, self.grid).reshape(-1)
                for b in gt_boxes
            ])
            att = attention_loss(out["states"], targets)
            if self.cfg.supervise_diffuse:
                att = T.add(att, diffuse_supervision_loss(out["states"], targets))
            parts["att"] = att.item()
        lam = self.cfg.lambda_att if self.cfg.enable_att_loss else 0.0
        total = H.total_loss(det, att, lam)
        parts["det"] = det.item()
        parts["total"] = total.item()
        return total, parts

    # -- inference ----------------------------------------------------------
    def predict(self, images, sequences):
        """Best decoded box per sample, eval mode, no gradient recording.

        Returns (boxes (B, 4) normalized top-left, confidences (B,), extras).
        """
        out = self.forward(images, sequences, "eval")
        raw = out["raw"].data
        boxes, confs, entries = [], [], []
        for b in range(raw.shape[0]):
            box, conf, entry = H.predict_best_box(raw[b], self.priors)
            boxes.append(box)
            confs.append(conf)
            entries.append(entry)
        extras = {
            "beta": None if out["beta"] is None else out["beta"].data,
            "states": out["states"],
            "entries": entries,
        }
        return np.stack(boxes), np.asarray(confs), extras
