"""Command-line entry point: preprocess, synth, gt, train, embed, eval.

Runs are driven by a flat key=value config file plus a few flags. Exit
codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
Commands validate all inputs before writing anything; outputs go
through a temp-file rename so failed runs leave no partial artifacts.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

import numpy as np

from .errors import DataError, NumericError
from .evaluation import evaluate, save_embeddings
from .geo import (SynthConfig, clean_trajectory, load_trajectories, mean_latitude,
                  project_to_local_plane, save_trajectories, synth_generate,
                  unproject_from_local_plane)
from .measures import MeasureKind, build_gt_matrix, estimate_scale, load_gt_matrix, save_gt_matrix
from .model import Model, ModelConfig, encode_batch
from .train import TrainConfig, fit, load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# Config file: one `key = value` per line, '#' comments, unknown keys rejected.
CONFIG_KEYS = {
    "dataset": str, "out": str, "measure": str, "split": str,
    "d": int, "heads": int, "layers": int,
    "lr": float, "batch": int, "epochs": int, "patience": int,
    "lambda": float, "seed": int, "scale_pairs": int,
}

CONFIG_DEFAULTS = {
    "measure": "frechet", "split": "0.7,0.1,0.2",
    "d": 128, "heads": 8, "layers": 1,
    "lr": 0.002, "batch": 128, "epochs": 40, "patience": 10,
    "lambda": 0.2, "seed": 0, "scale_pairs": 10000,
}


def load_config(path):
    cfg = dict(CONFIG_DEFAULTS)
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise DataError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                cfg[key] = CONFIG_KEYS[key](value)
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad value for {key!r}: {value!r}") from None
    for required in ("dataset", "out"):
        if required not in cfg:
            raise DataError(f"{path}: missing required key {required!r}")
    return cfg


def _parse_split(text):
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3 or any(p <= 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
        raise DataError(f"split must be three positive fractions summing to 1, got {text!r}")
    return parts


def _atomic_write(path, write_fn):
    tmp = f"{path}.tmp"
    write_fn(tmp)
    os.replace(tmp, path)


def _load_planar_dataset(path, ref_lat=None):
    """Load a lon/lat text dataset and project it; returns (trajs, ref_lat)."""
    raw = load_trajectories(path)
    if not raw:
        raise DataError(f"{path}: no trajectories")
    if ref_lat is None:
        ref_lat = mean_latitude(raw)
    return [project_to_local_plane(t, ref_lat) for t in raw], ref_lat


def cmd_preprocess(args):
    raw = load_trajectories(args.input)
    accepted, rejected = [], 0
    for t in raw:
        cleaned = clean_trajectory(t, args.min_len, args.max_len)
        if cleaned is None:
            rejected += 1
        else:
            accepted.append(cleaned)
    _atomic_write(args.output, lambda p: save_trajectories(accepted, p))
    print(f"accepted\t{len(accepted)}")
    print(f"rejected\t{rejected}")
    return EXIT_OK


def cmd_synth(args):
    bbox = tuple(float(v) for v in args.bbox.split(","))
    if len(bbox) != 4:
        raise UsageError("--bbox needs 'xmin,ymin,xmax,ymax' in meters")
    cfg = SynthConfig(count=args.count, n_min=args.n_min, n_max=args.n_max, bbox=bbox,
                      heading_noise_std=args.heading_noise,
                      step_log_mu=float(np.log(args.step_scale)),
                      step_log_sigma=args.step_sigma, seed=args.seed)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    trajs = [unproject_from_local_plane(t, 0.0) for t in synth_generate(cfg)]
    _atomic_write(args.out, lambda p: save_trajectories(trajs, p))
    print(f"written\t{len(trajs)}")
    return EXIT_OK


def cmd_gt(args):
    kind = MeasureKind.parse(args.measure)
    trajs, _ = _load_planar_dataset(args.data)
    if len(trajs) < 2:
        raise UsageError(f"dataset has {len(trajs)} trajectories; need at least 2")
    started = time.monotonic()
    scale = estimate_scale(trajs, kind, max_pairs=args.scale_pairs, seed=args.seed)
    gt = build_gt_matrix(trajs, kind, scale, workers=args.workers)
    _atomic_write(args.out, lambda p: save_gt_matrix(gt, p))
    print(f"scale\t{scale.s:.6f}")
    print(f"seconds\t{time.monotonic() - started:.3f}")
    return EXIT_OK


def _split_indices(n, fractions, seed):
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(fractions[0] * n)
    n_val = int(fractions[1] * n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out"] = args.out
    kind = MeasureKind.parse(cfg["measure"])
    fractions = _parse_split(cfg["split"])

    trajs, ref_lat = _load_planar_dataset(cfg["dataset"])
    gt_path = os.path.join(cfg["out"], f"gt-{kind.value}.tsim")
    if not os.path.exists(gt_path):
        raise DataError(f"missing ground-truth file {gt_path}; run `trajsim gt` first")
    gt = load_gt_matrix(gt_path)
    if gt.n != len(trajs):
        raise DataError(f"{gt_path} covers {gt.n} trajectories but dataset has {len(trajs)}")

    train_idx, val_idx, _ = _split_indices(len(trajs), fractions, cfg["seed"])
    if len(val_idx) < 11:
        raise UsageError(f"validation split of {len(val_idx)} is too small for HR@10")
    scale = estimate_scale(trajs, kind, max_pairs=cfg["scale_pairs"], seed=cfg["seed"])

    model_cfg = ModelConfig(d=cfg["d"], heads=cfg["heads"], layers=cfg["layers"])
    model = Model.init(model_cfg, seed=cfg["seed"])
    model.ref_lat = ref_lat
    model.scale = scale
    train_cfg = TrainConfig(lr=cfg["lr"], batch_size=cfg["batch"], max_epochs=cfg["epochs"],
                            patience=cfg["patience"], lam=cfg["lambda"], seed=cfg["seed"])

    os.makedirs(cfg["out"], exist_ok=True)
    log_lines = []

    def log(line):
        log_lines.append(line)
        print(line)

    sub = lambda idx: type(gt)(values=gt.values[np.ix_(idx, idx)])
    report = fit([trajs[i] for i in train_idx], [trajs[i] for i in val_idx],
                 sub(train_idx), sub(val_idx), model, train_cfg, log=log)

    def write_log(p):
        with open(p, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")

    _atomic_write(os.path.join(cfg["out"], "checkpoint.tsck"),
                  lambda p: save_checkpoint(model, p))
    _atomic_write(os.path.join(cfg["out"], "train.log"), write_log)
    print(f"best_epoch\t{report.best_epoch}")
    print(f"stop\t{report.stop_reason}")
    return EXIT_OK


def cmd_embed(args):
    model = load_checkpoint(args.checkpoint)
    trajs, _ = _load_planar_dataset(args.data, ref_lat=model.ref_lat)
    emb = encode_batch(trajs, model)
    _atomic_write(args.out, lambda p: save_embeddings(emb, p))
    print(f"embedded\t{len(trajs)}")
    print(f"dim\t{emb.shape[1]}")
    return EXIT_OK


def cmd_eval(args):
    kind = MeasureKind.parse(args.measure)
    model = load_checkpoint(args.checkpoint)
    if model.scale is None:
        raise DataError(f"{args.checkpoint}: no similarity scale stored; retrain first")
    trajs, _ = _load_planar_dataset(args.data, ref_lat=model.ref_lat)
    lines = []
    base = evaluate(model, trajs, kind, model.scale, use_gt_as_pred=args.oracle,
                    workers=args.workers)
    lines.extend(base.lines())
    if not args.oracle and (args.mask is not None or args.shift is not None):
        variant = evaluate(model, trajs, kind, model.scale, mask_ratio=args.mask,
                           shift_dist=args.shift, seed=args.seed, workers=args.workers)
        tag = "".join([f"_mask{int(args.mask * 100)}" if args.mask is not None else "",
                       f"_shift{int(args.shift)}" if args.shift is not None else ""])
        lines.extend(variant.lines(suffix=tag))
        for (bname, bval), (vname, vval) in zip(
                [l.split("\t") for l in base.lines()],
                [l.split("\t") for l in variant.lines()]):
            lines.append(f"delta_{bname}{tag}\t{float(bval) - float(vval):.6f}")
    for line in lines:
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)

        def write_metrics(p):
            with open(p, "w", encoding="utf-8") as fh:
                fh.write("\n".join(lines) + "\n")

        _atomic_write(os.path.join(args.out, "metrics.txt"), write_metrics)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="trajsim", description=__doc__)
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("preprocess", help="clean a raw trajectory text file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--min-len", type=int, default=20)
    p.add_argument("--max-len", type=int, default=200)
    p.set_defaults(fn=cmd_preprocess)

    p = subs.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--n-min", type=int, default=20)
    p.add_argument("--n-max", type=int, default=50)
    p.add_argument("--bbox", default="0,0,10000,10000", help="xmin,ymin,xmax,ymax meters")
    p.add_argument("--heading-noise", type=float, default=0.25)
    p.add_argument("--step-scale", type=float, default=100.0, help="median step length, meters")
    p.add_argument("--step-sigma", type=float, default=0.4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_synth)

    p = subs.add_parser("gt", help="compute a ground-truth similarity matrix")
    p.add_argument("--data", required=True)
    p.add_argument("--measure", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-pairs", type=int, default=10000)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(fn=cmd_gt)

    p = subs.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_train)

    p = subs.add_parser("embed", help="dump embeddings for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_embed)

    p = subs.add_parser("eval", help="retrieval metrics on a test dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--measure", required=True)
    p.add_argument("--mask", type=float, default=None, help="query mask ratio, e.g. 0.4")
    p.add_argument("--shift", type=float, default=None, help="query shift radius, meters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle", action="store_true", help="self-test: use gt as predictions")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
