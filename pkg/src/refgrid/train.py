"""Training driver: Adam, step decay, early stopping, checkpoints, metrics.

The metrics log is line-delimited JSON, one record per epoch, containing only
deterministic quantities (losses, precision, learning rate) so two runs with
the same seed produce byte-identical logs; wall-clock timing goes to the
console instead.  The best-validation checkpoint and the latest checkpoint
are kept separately; a NaN/Inf loss aborts training and leaves both in place.
"""

import json
import os
import time

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, load_model_state, model_state, save_checkpoint
from .config import RunConfig, config_fields, parse_config_text
from .data import GroundingDataset, fit_priors
from .head import iou_center, topleft_to_center
from .model import GroundingModel
from .text import tokenize

BEST_NAME = "best.ckpt"
LAST_NAME = "last.ckpt"
METRICS_NAME = "metrics.jsonl"


class Adam:
    """Adam with bias correction; one (m, v) slot pair per parameter."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = dict(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.slots = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                      for name, p in self.params.items()}
        self.step_count = 0

    def step(self, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.slots[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def make_priors(dataset, cfg):
    """Fit shape priors on the training boxes; returned in grid-cell units."""
    grid = cfg.image_size // 16
    wh = dataset.boxes[:, 2:4]
    return fit_priors(wh, cfg.num_priors, seed=cfg.seed) * grid


def tokenize_records(dataset, cfg):
    return [tokenize(r["expression"], dataset.vocab, cfg.max_tokens)
            for r in dataset.records]


def evaluate(model, dataset, sequences=None, batch_size=50, indices=None):
    """Precision@0.5 overall and per template class."""
    if sequences is None:
        seqs_all = [tokenize(r["expression"], dataset.vocab)
                    for r in dataset.records]
    else:
        seqs_all = sequences
    idx = np.arange(len(dataset)) if indices is None else np.asarray(indices)
    hits = {}
    counts = {}
    correct = 0
    for lo in range(0, idx.size, batch_size):
        chunk = idx[lo:lo + batch_size]
        imgs = dataset.batch_images(chunk)
        seqs = [seqs_all[i] for i in chunk]
        boxes, _, _ = model.predict(imgs, seqs)
        gt = dataset.boxes[chunk]
        ious = iou_center(topleft_to_center(boxes), topleft_to_center(gt))
        for k, i in enumerate(chunk):
            tmpl = dataset.templates[i]
            ok = bool(ious[k] > 0.5)
            hits[tmpl] = hits.get(tmpl, 0) + int(ok)
            counts[tmpl] = counts.get(tmpl, 0) + 1
            correct += int(ok)
    per_template = {t: hits[t] / counts[t] for t in sorted(counts)}
    return {"precision": correct / idx.size, "per_template": per_template,
            "count": int(idx.size)}


def _checkpoint_meta(cfg, priors, epoch, step, best):
    meta = {}
    for line in cfg.to_lines().splitlines():
        key, _, val = line.partition("=")
        meta[key.strip()] = val.strip()
    meta["ckpt.epoch"] = epoch
    meta["ckpt.step"] = step
    meta["ckpt.best"] = repr(float(best))
    meta["ckpt.priors"] = ",".join(repr(float(v)) for v in np.asarray(priors).reshape(-1))
    return meta


def config_from_meta(meta):
    """Rebuild (RunConfig, priors, extras) from checkpoint metadata."""
    fields = config_fields()
    cfg_lines = "\n".join(f"{k} = {v}" for k, v in meta.items() if k in fields)
    cfg = RunConfig(**parse_config_text(cfg_lines)).validate()
    priors = np.array([float(v) for v in meta["ckpt.priors"].split(",")])
    priors = priors.reshape(-1, 2)
    extras = {k: v for k, v in meta.items() if k.startswith("ckpt.")}
    return cfg, priors, extras


def train_model(cfg, data_dir, out_dir, resume=None, log=print,
                max_train=None, stop_at=None):
    """Run the full training loop; returns a summary dict.

    ``max_train`` optionally restricts the number of training records (used
    by smoke tests); validation always uses the full val split.  ``stop_at``
    ends training early once validation precision reaches the given value.
    """
    os.makedirs(out_dir, exist_ok=True)
    train_ds = GroundingDataset(data_dir, "train")
    val_ds = GroundingDataset(data_dir, "val")
    priors = make_priors(train_ds, cfg)
    model = GroundingModel(cfg, len(train_ds.vocab), priors)
    optimizer = Adam(model.trainable_parameters())

    train_seqs = tokenize_records(train_ds, cfg)
    val_seqs = tokenize_records(val_ds, cfg)
    n_train = len(train_ds) if max_train is None else min(max_train, len(train_ds))

    start_epoch = 0
    best = -1.0
    if resume:
        arrays, meta = load_checkpoint(resume)
        saved_cfg, saved_priors, extras = config_from_meta(meta)
        # schedule length and paths may change between sessions; everything
        # that shapes the model or data must not
        ignore = {"max_epochs", "patience", "data_dir", "out_dir"}
        for name in config_fields():
            if name in ignore:
                continue
            if getattr(saved_cfg, name) != getattr(cfg, name):
                raise ValueError(
                    f"resume config mismatch on {name!r}: checkpoint has "
                    f"{getattr(saved_cfg, name)!r}, requested {getattr(cfg, name)!r}")
        model.priors = saved_priors
        load_model_state(model, arrays, optimizer)
        optimizer.step_count = int(extras.get("ckpt.step", 0))
        start_epoch = int(extras.get("ckpt.epoch", 0)) + 1
        best = float(extras.get("ckpt.best", -1.0))

    metrics_path = os.path.join(out_dir, METRICS_NAME)
    mode = "a" if resume else "w"
    since_best = 0
    summary = {"epochs": 0, "best_val_precision": best, "aborted": False}

    with open(metrics_path, mode, encoding="utf-8") as metrics:
        for epoch in range(start_epoch, cfg.max_epochs):
            lr = cfg.lr * (0.5 ** (epoch // cfg.lr_half_every))
            order = np.random.default_rng([cfg.seed, 1000 + epoch]).permutation(n_train)
            t0 = time.time()
            sums = {"total": 0.0, "det": 0.0, "att": 0.0}
            n_batches = 0
            for lo in range(0, n_train - cfg.batch_size + 1, cfg.batch_size):
                batch = order[lo:lo + cfg.batch_size]
                imgs = train_ds.batch_images(batch)
                seqs = [train_seqs[i] for i in batch]
                boxes = train_ds.boxes[batch]
                with T.Tape():
                    loss, parts = model.loss(imgs, seqs, boxes)
                    if not np.isfinite(parts["total"]):
                        summary["aborted"] = True
                        raise T.NumericError(
                            f"non-finite loss at epoch {epoch}; "
                            f"checkpoints in {out_dir} retain the last good state")
                    T.backward(loss)
                optimizer.step(lr)
                sums["total"] += parts["total"]
                sums["det"] += parts["det"]
                sums["att"] += parts.get("att", 0.0)
                n_batches += 1
            val = evaluate(model, val_ds, val_seqs)
            record = {
                "epoch": epoch,
                "lr": lr,
                "train_total": sums["total"] / n_batches,
                "train_det": sums["det"] / n_batches,
                "train_att": sums["att"] / n_batches,
                "val_precision": val["precision"],
            }
            metrics.write(json.dumps(record, sort_keys=True) + "\n")
            metrics.flush()
            dt = time.time() - t0
            log(f"epoch {epoch}: loss {record['train_total']:.4f} "
                f"det {record['train_det']:.4f} att {record['train_att']:.4f} "
                f"val {val['precision']:.4f} lr {lr:.5f} ({dt:.1f}s)")

            step = optimizer.step_count
            save_checkpoint(os.path.join(out_dir, LAST_NAME),
                            model_state(model, optimizer),
                            _checkpoint_meta(cfg, priors, epoch, step, best))
            if val["precision"] > best + 1e-12:
                best = val["precision"]
                since_best = 0
                save_checkpoint(os.path.join(out_dir, BEST_NAME),
                                model_state(model, optimizer),
                                _checkpoint_meta(cfg, priors, epoch, step, best))
            else:
                since_best += 1
            summary["epochs"] = epoch + 1
            summary["best_val_precision"] = best
            if stop_at is not None and best >= stop_at:
                log(f"target reached: val precision {best:.4f} >= {stop_at}")
                break
            if since_best >= cfg.patience:
                log(f"early stop: no val improvement in {cfg.patience} epochs")
                break
    return summary


def load_model_from_checkpoint(path, vocab_size):
    """Rebuild a model (eval-ready) from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    cfg, priors, extras = config_from_meta(meta)
    model = GroundingModel(cfg, vocab_size, priors)
    load_model_state(model, arrays)
    return model, cfg, extras
