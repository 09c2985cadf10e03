"""Inference latency measurement and architecture comparisons.

Times the full predict path (backbone, fusion, attention, decode, argmax)
in eval mode.  Reports mean/median/p95 latency, derived throughput, and a
95% confidence interval on the mean; more iterations tighten the interval.
Two serving shapes are measured: one sample per pass and a batched pass.
When both kernel backends are importable the same workload is timed on each,
and optional comparison runs check the expected cost ordering of attention
heads (more heads, more work) and of disabling the attention stage entirely.
"""

import dataclasses
import json
import time

import numpy as np

from . import backend
from .config import RunConfig
from .data import build_vocabulary, generate_scene, image_to_array, render
from .model import GroundingModel
from .text import tokenize

_SCENE_SEED = 20240297


def _workload(cfg, count):
    """Deterministic scenes + token sequences for timing."""
    vocab = build_vocabulary()
    images = []
    seqs = []
    for i in range(count):
        scene = generate_scene(_SCENE_SEED, i, cfg)
        images.append(image_to_array(render(scene)))
        seqs.append(tokenize(scene.expression, vocab, cfg.max_tokens))
    return np.stack(images), seqs, vocab


def _stats(times_s, batch):
    arr = np.asarray(times_s, dtype=np.float64)
    n = arr.size
    mean = float(arr.mean())
    ci = float(1.96 * arr.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return {
        "iterations": int(n),
        "batch": int(batch),
        "mean_ms": mean * 1e3,
        "median_ms": float(np.median(arr)) * 1e3,
        "p95_ms": float(np.percentile(arr, 95)) * 1e3,
        "ci95_ms": ci * 1e3,
        "fps": batch / mean,
    }


def time_predict(model, images, seqs, iterations, warmup=3):
    """Wall-clock times of ``iterations`` eval-mode predict passes."""
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    for _ in range(warmup):
        model.predict(images, seqs)
    times = []
    for _ in range(iterations):
        t0 = time.perf_counter()
        model.predict(images, seqs)
        times.append(time.perf_counter() - t0)
    return _stats(times, images.shape[0])


def _fresh_model(cfg, vocab_size):
    grid = cfg.image_size // 16
    priors = np.linspace(0.6, 1.8, cfg.num_priors * 2).reshape(-1, 2)
    priors = np.minimum(priors, grid)
    return GroundingModel(cfg, vocab_size, priors)


def run_bench(cfg, iterations=30, batch=8, checkpoint=None, compare=True,
              progress=print):
    """Produce the full latency report as a dict (also pretty-printed)."""
    if iterations <= 0:
        raise ValueError("iterations must be positive")
    images, seqs, vocab = _workload(cfg, max(batch, 1))
    if checkpoint is not None:
        from .train import load_model_from_checkpoint
        model, cfg, _ = load_model_from_checkpoint(checkpoint, len(vocab))
    else:
        model = _fresh_model(cfg, len(vocab))

    report = {"backend": backend.active_backend(), "iterations": iterations}
    report["single"] = time_predict(model, images[:1], seqs[:1], iterations)
    report["batched"] = time_predict(model, images[:batch], seqs[:batch], iterations)
    progress(f"single  sample: mean {report['single']['mean_ms']:.2f} ms "
             f"(median {report['single']['median_ms']:.2f}, "
             f"p95 {report['single']['p95_ms']:.2f}, "
             f"+-{report['single']['ci95_ms']:.2f}) "
             f"{report['single']['fps']:.1f} samples/s")
    progress(f"batched ({batch}): mean {report['batched']['mean_ms']:.2f} ms "
             f"-> {report['batched']['fps']:.1f} samples/s")

    names = backend.available_backends()
    if len(names) > 1:
        report["backends"] = {}
        for name in names:
            with backend.use(name):
                report["backends"][name] = time_predict(
                    model, images[:1], seqs[:1], iterations)
            progress(f"backend {name}: mean "
                     f"{report['backends'][name]['mean_ms']:.2f} ms per sample")

    if compare:
        report["comparisons"] = _comparison_suite(cfg, vocab, images, seqs,
                                                  iterations, progress)
    return report


def _comparison_suite(cfg, vocab, images, seqs, iterations, progress):
    """Cost-ordering checks: more heads and enabled attention cost more."""
    out = {}

    one = dataclasses.replace(cfg, heads=1).validate()
    four = dataclasses.replace(cfg, heads=4).validate()
    t1 = time_predict(_fresh_model(one, len(vocab)), images[:1], seqs[:1], iterations)
    t4 = time_predict(_fresh_model(four, len(vocab)), images[:1], seqs[:1], iterations)
    out["heads_1_mean_ms"] = t1["mean_ms"]
    out["heads_4_mean_ms"] = t4["mean_ms"]
    out["heads_4_not_faster"] = t4["mean_ms"] >= t1["mean_ms"]
    progress(f"heads: k=1 {t1['mean_ms']:.2f} ms, k=4 {t4['mean_ms']:.2f} ms "
             f"(k=4 slower or equal: {out['heads_4_not_faster']})")

    with_att = dataclasses.replace(cfg, enable_attention=True).validate()
    no_att = dataclasses.replace(cfg, enable_attention=False).validate()
    ta = time_predict(_fresh_model(with_att, len(vocab)), images[:1], seqs[:1], iterations)
    tn = time_predict(_fresh_model(no_att, len(vocab)), images[:1], seqs[:1], iterations)
    out["attention_on_mean_ms"] = ta["mean_ms"]
    out["attention_off_mean_ms"] = tn["mean_ms"]
    out["attention_costs_more"] = ta["mean_ms"] > tn["mean_ms"]
    progress(f"attention: on {ta['mean_ms']:.2f} ms, off {tn['mean_ms']:.2f} ms "
             f"(on costs more: {out['attention_costs_more']})")
    return out


def write_report(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
