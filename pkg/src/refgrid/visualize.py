"""Prediction rendering: boxes, attention heatmaps, scale-weight sidecars.

For each requested record this emits, into the output directory:

* ``<scene_id>_boxes.png``   — the scene upscaled 4x with the ground-truth
  box in green and the predicted box in red.
* ``<scene_id>_head<i>.png`` — one grayscale heatmap per attention head,
  collect weights upsampled (nearest) to canvas size.
* ``<scene_id>.txt``         — expression, template, confidence, predicted
  and ground-truth boxes, and the per-scale fusion weights (which sum to 1).
"""

import os

import numpy as np
from PIL import Image, ImageDraw

from .data import GroundingDataset
from .head import iou_center, topleft_to_center

UPSCALE = 4
GT_COLOR = (40, 220, 60)
PRED_COLOR = (235, 50, 40)


def _draw_box(draw, box, size, color):
    """box: normalized top-left (x, y, w, h) onto an upscaled canvas."""
    x, y, w, h = (float(v) * size for v in box)
    draw.rectangle([x, y, x + w, y + h], outline=color, width=2)


def _boxes_image(image_u8, gt_box, pred_box):
    img = Image.fromarray(image_u8).resize(
        (image_u8.shape[1] * UPSCALE, image_u8.shape[0] * UPSCALE),
        Image.NEAREST)
    draw = ImageDraw.Draw(img)
    _draw_box(draw, gt_box, img.width, GT_COLOR)
    _draw_box(draw, pred_box, img.width, PRED_COLOR)
    return img


def _heatmap_image(weights_2d, size):
    w = np.asarray(weights_2d, dtype=np.float64)
    peak = w.max()
    norm = w / peak if peak > 0 else w
    gray = (norm * 255.0).round().astype(np.uint8)
    return Image.fromarray(gray, mode="L").resize((size, size), Image.NEAREST)


def visualize_records(model, dataset, indices, out_dir, progress=print):
    """Render predictions for dataset records; returns emitted file paths."""
    os.makedirs(out_dir, exist_ok=True)
    from .text import tokenize
    emitted = []
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < len(dataset):
            raise IndexError(f"record index {idx} out of range "
                             f"(split has {len(dataset)} records)")
        record = dataset.records[idx]
        images = dataset.batch_images([idx])
        seqs = [tokenize(record["expression"], dataset.vocab)]
        boxes, confs, extras = model.predict(images, seqs)
        pred, conf = boxes[0], float(confs[0])
        gt = dataset.boxes[idx]
        iou = float(iou_center(topleft_to_center(pred), topleft_to_center(gt)))

        scene_id = record["scene_id"]
        canvas = (images[0] * 255.0).round().astype(np.uint8)
        size = canvas.shape[0] * UPSCALE

        box_path = os.path.join(out_dir, f"{scene_id}_boxes.png")
        _boxes_image(canvas, gt, pred).save(box_path)
        emitted.append(box_path)

        grid = model.grid
        states = extras.get("states") or []
        for h, state in enumerate(states):
            weights = state.collect_weights.data[0].reshape(grid, grid)
            head_path = os.path.join(out_dir, f"{scene_id}_head{h}.png")
            _heatmap_image(weights, size).save(head_path)
            emitted.append(head_path)

        beta = extras.get("beta")
        lines = [
            f"scene_id: {scene_id}",
            f"expression: {record['expression']}",
            f"template: {record.get('template', '?')}",
            f"confidence: {conf:.6f}",
            f"iou: {iou:.6f}",
            "gt_box: " + " ".join(f"{v:.6f}" for v in gt),
            "pred_box: " + " ".join(f"{v:.6f}" for v in pred),
        ]
        if beta is not None:
            vals = [float(v) for v in np.asarray(beta)[0].reshape(-1)]
            lines.append("scale_weights: " + " ".join(f"{v:.8f}" for v in vals))
            lines.append(f"scale_weights_sum: {sum(vals):.8f}")
        txt_path = os.path.join(out_dir, f"{scene_id}.txt")
        with open(txt_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        emitted.append(txt_path)
        progress(f"{scene_id}: iou {iou:.3f} conf {conf:.3f} -> "
                 f"{len(states) + 2} files")
    return emitted


def visualize_from_checkpoint(checkpoint, data_dir, split, indices, out_dir,
                              progress=print):
    dataset = GroundingDataset(data_dir, split)
    from .train import load_model_from_checkpoint
    model, _, _ = load_model_from_checkpoint(checkpoint, len(dataset.vocab))
    return visualize_records(model, dataset, indices, out_dir, progress)
