"""``msw`` command line: gen-data, train, eval, ablate, visualize.

Exit status is 0 on success, 1 on a runtime failure and 2 on a usage error
(bad flags or a config file argparse cannot see into, such as unknown keys).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import ConfigError, load_config
from .synthdata import SceneError, generate_split
from .training import (
    TrainingError,
    ablate,
    ablation_csv,
    ablation_table,
    evaluate,
    load_model,
    load_split,
    train,
)

VAL_START_INDEX = 100_000


class UsageError(Exception):
    pass


def _config(args):
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"config file not found: {args.config}") from exc
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg = dataclasses.replace(cfg, scene=dataclasses.replace(cfg.scene, seed=seed)).replace_train(seed=seed)
    return cfg


def cmd_gen_data(args):
    cfg = _config(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    start = 0 if args.split == "train" else VAL_START_INDEX
    if args.split == "train" and args.n > VAL_START_INDEX:
        raise UsageError(f"train splits are capped at {VAL_START_INDEX} samples")
    generate_split(cfg.scene, args.n, args.out, start_index=start)
    with open(os.path.join(args.out, "annotations.json")) as fh:
        doc = json.load(fh)
    camo = sum(1 for im in doc["images"] if im["camouflage"])
    print(f"wrote {len(doc['images'])} images, {len(doc['annotations'])} instances to {args.out}")
    print(f"camouflage fraction: {camo / len(doc['images']):.2f}")
    return 0


def _progress(rep):
    print(
        f"step {rep.step:6d}  total {rep.total:.4f}  det {rep.detection:.4f}  "
        f"proj {rep.projection:.4f}  pair {rep.pairwise:.4f}",
        flush=True,
    )


def cmd_train(args):
    cfg = _config(args)
    changes = {}
    if args.iterations is not None:
        changes["iterations"] = args.iterations
    if args.batch_size is not None:
        changes["batch_size"] = args.batch_size
    if changes:
        try:
            cfg = cfg.replace_train(**changes)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.resume and not os.path.exists(args.resume):
        print(f"error: checkpoint not found: {args.resume}", file=sys.stderr)
        return 1
    final = train(cfg.run, args.data, args.out, resume=args.resume, progress=_progress)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args):
    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    model, run = load_model(args.checkpoint)
    result = evaluate(model, args.data, run.train.flow_input)
    out = args.out or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "eval.json")
    with open(out, "w") as fh:
        fh.write(result.to_json() + "\n")
    print(result.table())
    print(f"wrote {out}")
    return 0


def cmd_ablate(args):
    cfg = _config(args)
    if args.iterations is not None:
        cfg = cfg.replace_train(iterations=args.iterations)
    axes = [a.strip() for a in args.axes.split(",") if a.strip()]
    os.makedirs(args.out, exist_ok=True)
    train_records = load_split(args.data)
    eval_records = load_split(args.eval_data) if args.eval_data else train_records
    try:
        results = ablate(cfg.run, axes, train_records, eval_records, args.out)
    except ValueError as exc:
        if "unknown ablation axes" in str(exc):
            raise UsageError(str(exc)) from exc
        raise
    with open(os.path.join(args.out, "ablation.csv"), "w") as fh:
        fh.write(ablation_csv(results))
    table = ablation_table(results)
    with open(os.path.join(args.out, "ablation.txt"), "w") as fh:
        fh.write(table + "\n")
    print(table)
    return 0


def cmd_visualize(args):
    from .visualize import render

    if not os.path.exists(args.checkpoint):
        print(f"error: checkpoint not found: {args.checkpoint}", file=sys.stderr)
        return 1
    model, run = load_model(args.checkpoint)
    records = load_split(args.data)
    if not 0 <= args.index < len(records):
        print(f"error: index {args.index} out of range for {len(records)} samples", file=sys.stderr)
        return 1
    paths = render(model, run, records[args.index], args.out, args.max_magnitude)
    for p in paths:
        print(p)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="msw", description="Motion-aided box-supervised instance segmentation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic moving-shapes split")
    g.add_argument("--config")
    g.add_argument("--split", choices=("train", "val"), default="train")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a generated split")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="mask and box AP of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="JSON output path (default: eval.json next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate ablation variants")
    a.add_argument("--config")
    a.add_argument("--axes", required=True, help="comma-separated: components, fusion or single axes")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data")
    a.add_argument("--out", required=True)
    a.add_argument("--iterations", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    v = sub.add_parser("visualize", help="write diagnostic PNGs for one sample")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--index", type=int, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--max-magnitude", type=float, help="fixed flow scale for the color wheel")
    v.set_defaults(func=cmd_visualize)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except TrainingError as exc:
        print(f"error: training failed at step {exc.step}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, SceneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
