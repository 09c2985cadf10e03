"""Command line entry point.

Subcommands: gen-data, train, eval, gradcheck, bench, visualize.  Every
subcommand accepts ``--config <path>`` (key = value lines) plus one override
flag per config key; precedence is defaults < file < RGIN_SEED < flags.
Errors exit nonzero with a single-line diagnostic on stderr.
"""

import argparse
import json
import os
import sys

from .config import coerce_field, config_fields, load_config


def _add_config_flags(sp):
    sp.add_argument("--config", default=None, metavar="PATH",
                    help="key = value config file")
    group = sp.add_argument_group("config overrides")
    for name in config_fields():
        group.add_argument(f"--{name.replace('_', '-')}",
                           dest=f"cfg_{name}", default=None, metavar="V")


def _config_from(args):
    overrides = {}
    for name in config_fields():
        raw = getattr(args, f"cfg_{name}", None)
        if raw is not None:
            overrides[name] = coerce_field(name, raw)
    return load_config(args.config, overrides)


def _cmd_gen_data(args):
    from .data import generate_dataset
    cfg = _config_from(args)
    summary = generate_dataset(cfg, cfg.data_dir)
    print(f"wrote {summary['total']} scenes "
          f"({summary['verified']} verified unique-referent) to {cfg.data_dir}")
    for name, count in sorted(summary["per_template"].items()):
        print(f"  {name}: {count}")
    return 0


def _cmd_train(args):
    from .train import train_model
    cfg = _config_from(args)
    summary = train_model(cfg, cfg.data_dir, cfg.out_dir, resume=args.resume)
    print(f"done: {summary['epochs']} epochs, "
          f"best val precision {summary['best_val_precision']:.4f}")
    return 0


def _cmd_eval(args):
    from .data import GroundingDataset
    from .train import evaluate, load_model_from_checkpoint
    cfg = _config_from(args)
    dataset = GroundingDataset(cfg.data_dir, args.split)
    model, _, _ = load_model_from_checkpoint(args.checkpoint, len(dataset.vocab))
    result = evaluate(model, dataset)
    print(f"precision@0.5 ({args.split}, {result['count']} scenes): "
          f"{result['precision']:.4f}")
    for name, value in result["per_template"].items():
        print(f"  {name}: {value:.4f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _cmd_gradcheck(args):
    from .gradcheck import run_gradcheck
    _, ok = run_gradcheck()
    if not ok:
        raise RuntimeError("gradient check failed")
    print("all gradient checks passed")
    return 0


def _cmd_bench(args):
    from .bench import run_bench, write_report
    cfg = _config_from(args)
    report = run_bench(cfg, iterations=args.iterations, batch=args.batch,
                       checkpoint=args.checkpoint,
                       compare=not args.no_compare)
    if args.out:
        write_report(report, args.out)
        print(f"report written to {args.out}")
    return 0


def _cmd_visualize(args):
    from .visualize import visualize_from_checkpoint
    cfg = _config_from(args)
    indices = [int(v) for v in args.ids.split(",") if v.strip() != ""]
    if not indices:
        raise ValueError("--ids must list at least one record index")
    files = visualize_from_checkpoint(args.checkpoint, cfg.data_dir,
                                      args.split, indices, args.viz_dir)
    print(f"wrote {len(files)} files to {args.viz_dir}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="refgrid",
        description="referring-expression grounding on synthetic scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    _add_config_flags(sp)
    sp.set_defaults(func=_cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    _add_config_flags(sp)
    sp.add_argument("--resume", default=None, metavar="CKPT",
                    help="checkpoint to continue from")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", required=True, metavar="CKPT")
    sp.add_argument("--split", default="test",
                    choices=("train", "val", "test"))
    sp.add_argument("--out", default=None, metavar="JSON",
                    help="also write results as JSON")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_config_flags(sp)
    sp.set_defaults(func=_cmd_gradcheck)

    sp = sub.add_parser("bench", help="latency benchmark")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", default=None, metavar="CKPT")
    sp.add_argument("--iterations", type=int, default=30)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--no-compare", action="store_true",
                    help="skip head-count / attention cost comparisons")
    sp.add_argument("--out", default=None, metavar="JSON")
    sp.set_defaults(func=_cmd_bench)

    sp = sub.add_parser("visualize", help="render predictions for records")
    _add_config_flags(sp)
    sp.add_argument("--checkpoint", required=True, metavar="CKPT")
    sp.add_argument("--split", default="test",
                    choices=("train", "val", "test"))
    sp.add_argument("--ids", required=True, metavar="I,J,...",
                    help="comma-separated record indices within the split")
    sp.add_argument("--viz-dir", default="viz", metavar="DIR",
                    help="directory for emitted images and sidecars")
    sp.set_defaults(func=_cmd_visualize)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # single-line diagnostic, nonzero exit
        message = str(exc).replace("\n", " ").strip() or type(exc).__name__
        print(f"error: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
