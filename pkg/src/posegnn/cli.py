"""Command-line driver: ``posegnn gen|train|eval|sweep-k``.

Exit codes: 0 success, 2 usage or unreadable input, 3 divergence,
4 checkpoint/dataset incompatibility.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    FeatureMapConfig,
    SynthConfig,
    generate_feature_maps,
    generate_synthetic,
    load_dataset,
    save_dataset,
)
from .graph import feature_map_to_graph
from .model import (
    ENV_ALPHA,
    GRAPH_POSE,
    NODE_POSE,
    DivergenceError,
    GnnModel,
    TrainConfig,
    evaluate,
    infer_graph_pose,
    infer_node_pose,
    train_graph_pose,
    train_node_pose,
)

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED, EXIT_INCOMPATIBLE = 0, 2, 3, 4
MODES = {"node": NODE_POSE, "graph": GRAPH_POSE}
EVAL_COLUMNS = ["k", "conv", "mode", "alpha", "med_pos_m", "med_ori_deg"]


class UsageError(Exception):
    pass


class Incompatible(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("POSEGNN_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"POSEGNN_SEED must be an integer, got {raw!r}") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_dataset(path):
    try:
        return load_dataset(path)
    except (OSError, DatasetError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


# --- gen -----------------------------------------------------------------


def cmd_gen(args) -> int:
    seed = default_seed() if args.seed is None else args.seed
    common = dict(n_test=args.n_test, d=args.d, trajectory=args.trajectory,
                  feature_noise_sigma=args.sigma, embed_smoothness=args.smoothness,
                  seed=seed, spacing=args.spacing, jitter=args.jitter)
    try:
        if args.mode == "node":
            ds = generate_synthetic(SynthConfig(n_train=args.n_train, **common))
        else:
            ds = generate_feature_maps(FeatureMapConfig(n_train=args.n_train, map_l=args.map_l,
                                                        map_w=args.map_w, **common))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(ds, args.out)
    shape = f", maps {ds.map_shape[0]}x{ds.map_shape[1]}x{ds.node_dim}" if ds.map_shape else ""
    print(f"wrote {args.out}: {len(ds.indices(0))} train, {len(ds.indices(1))} test, d={ds.d}{shape}")
    return EXIT_OK


# --- train ---------------------------------------------------------------


def config_from_args(args) -> TrainConfig:
    alpha = args.alpha
    if alpha is None:
        alpha = ENV_ALPHA[args.env or "indoor"]
    try:
        return TrainConfig(
            k=args.k, alpha=alpha, learning_rate=args.lr, epochs=args.epochs,
            seed=default_seed() if args.seed is None else args.seed,
            conv_type=args.conv, mode=MODES[args.mode], activation=args.activation,
            widths=tuple(args.widths), momentum=args.momentum, batch_size=args.batch_size,
            optimizer=args.optimizer, neighbor_init_scale=args.neighbor_init_scale,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _graphs(ds, flag, k):
    if ds.map_shape is None:
        raise Incompatible("graph mode needs a feature-map dataset (header 'n d L W')")
    return [feature_map_to_graph(m, k) for m in ds.feature_maps(flag)]


def fit(ds, cfg: TrainConfig, on_epoch=None):
    """Train on the dataset's train split."""
    _, poses = ds.train()
    if cfg.mode == NODE_POSE:
        x, _ = ds.train()
        if cfg.k > len(x) - 1:
            raise UsageError(f"k={cfg.k} needs at least {cfg.k + 1} train rows, dataset has {len(x)}")
        run = lambda: train_node_pose(x, poses, cfg, on_epoch=on_epoch)  # noqa: E731
    else:
        graphs = _graphs(ds, 0, cfg.k)
        run = lambda: train_graph_pose(graphs, poses, cfg, on_epoch=on_epoch)  # noqa: E731
    # overflow on the way to a divergence is reported as DivergenceError
    with np.errstate(over="ignore", invalid="ignore"):
        return run()


def predict(model: GnnModel, cfg: TrainConfig, ds, split: str):
    flag = 1 if split == "test" else 0
    if model.mode == NODE_POSE:
        xtr, _ = ds.train()
        x, truth = ds.rows(flag)
        if x.shape[1] != model.d_feat:
            raise Incompatible(f"checkpoint expects d={model.d_feat}, dataset has d={x.shape[1]}")
        if len(x) == 0:
            raise UsageError(f"dataset has no {split} rows")
        return infer_node_pose(model, xtr, x, min(cfg.k, len(xtr))), truth
    if ds.map_shape is None or ds.node_dim != model.d_feat:
        raise Incompatible(f"checkpoint expects feature maps of depth {model.d_feat}")
    _, truth = ds.rows(flag)
    if not truth:
        raise UsageError(f"dataset has no {split} rows")
    return infer_graph_pose(model, _graphs(ds, flag, cfg.k)), truth


def _stem(args, cfg: TrainConfig) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = Path(args.dataset).stem
    return out / f"{base}.{cfg.conv_type}.{args.mode}.k{cfg.k}"


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    ds = _read_dataset(args.dataset)
    stem = _stem(args, cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else Path(f"{stem}.ckpt")
    log_path = Path(f"{stem}.loss.csv")
    t0 = time.perf_counter()
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "total", "position", "orientation"])

        def log(epoch, rep):
            writer.writerow([epoch, repr(rep.total), repr(rep.position_term), repr(rep.orientation_term)])
            if not args.quiet and (epoch % args.print_every == 0 or epoch == cfg.epochs - 1):
                print(f"epoch {epoch:5d}  loss {rep.total:.6g}  pos {rep.position_term:.6g}  "
                      f"ori {rep.orientation_term:.6g}")

        try:
            result = fit(ds, cfg, on_epoch=log)
        except DivergenceError as exc:
            print(f"error: training diverged at epoch {exc.epoch} (learning rate {exc.learning_rate:g})",
                  file=sys.stderr)
            return EXIT_DIVERGED
    save_checkpoint(ckpt, result.model, cfg, {"dataset_sha256": sha256_file(args.dataset)})
    wall = time.perf_counter() - t0
    metrics = {"initial_loss": result.history[0].total if result.history else None,
               "final_loss": result.final.total,
               "final_position_term": result.final.position_term,
               "final_orientation_term": result.final.orientation_term}
    manifest = {"command": "train", "config": cfg.to_dict(),
                "dataset": {"path": str(args.dataset), "sha256": sha256_file(args.dataset)},
                "checkpoint": str(ckpt), "loss_log": str(log_path),
                "metrics": metrics, "wall_time_s": wall}
    manifest_path = Path(args.manifest) if args.manifest else Path(args.out_dir) / "manifest.jsonl"
    with open(manifest_path, "a") as fh:
        fh.write(json.dumps(manifest, sort_keys=True) + "\n")
    print(f"final loss {result.final.total:.6g}; checkpoint {ckpt}; {wall:.1f} s")
    return EXIT_OK


# --- eval ----------------------------------------------------------------


def cmd_eval(args) -> int:
    try:
        model, cfg, _ = load_checkpoint(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        raise Incompatible(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    ds = _read_dataset(args.dataset)
    preds, truth = predict(model, cfg, ds, args.split)
    med_pos, med_ori = evaluate(preds, truth)
    row = [cfg.k, cfg.conv_type, cfg.mode, repr(cfg.alpha), repr(med_pos), repr(med_ori)]
    print(f"{'k':>4} {'conv':>5} {'mode':>10} {'alpha':>7} {'med_pos_m':>12} {'med_ori_deg':>12}")
    print(f"{cfg.k:>4} {cfg.conv_type:>5} {cfg.mode:>10} {cfg.alpha:>7g} {med_pos:>12.4f} {med_ori:>12.3f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(EVAL_COLUMNS)
            writer.writerow(row)
    return EXIT_OK


# --- sweep ---------------------------------------------------------------


def sweep_k(ds, base: TrainConfig, ks) -> list[tuple[int, float]]:
    rows = []
    for k in ks:
        cfg = replace(base, k=k)
        model = fit(ds, cfg).model
        preds, truth = predict(model, cfg, ds, "test")
        rows.append((k, evaluate(preds, truth)[0]))
    return rows


def cmd_sweep_k(args) -> int:
    if args.k_min < 1 or args.k_max < args.k_min:
        raise UsageError("need 1 <= --k-min <= --k-max")
    args.k = args.k_min
    base = config_from_args(args)
    ds = _read_dataset(args.dataset)
    limit = len(ds.indices(0)) - 1 if base.mode == NODE_POSE else (
        ds.map_shape[0] * ds.map_shape[1] - 1 if ds.map_shape else 0)
    if args.k_max > limit:
        raise UsageError(f"--k-max {args.k_max} exceeds n-1 = {limit}")
    try:
        rows = sweep_k(ds, base, range(args.k_min, args.k_max + 1))
    except DivergenceError as exc:
        print(f"error: training diverged at epoch {exc.epoch} (learning rate {exc.learning_rate:g})",
              file=sys.stderr)
        return EXIT_DIVERGED
    with open(args.csv, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["k", "med_pos_m"])
        writer.writerows((k, repr(e)) for k, e in rows)
    if args.dat:
        with open(args.dat, "w") as fh:
            fh.write("# k med_pos_m\n")
            fh.writelines(f"{k} {e:.17g}\n" for k, e in rows)
    for k, e in rows:
        print(f"k={k:3d}  median position error {e:.4f} m")
    best = min(rows, key=lambda r: r[1])
    print(f"best k={best[0]} ({best[1]:.4f} m)")
    return EXIT_OK


# --- parser --------------------------------------------------------------


def _add_train_flags(p: argparse.ArgumentParser, with_k: bool = True) -> None:
    p.add_argument("dataset", help="dataset file")
    p.add_argument("--conv", choices=["gcn", "wl"], default="wl")
    p.add_argument("--mode", choices=sorted(MODES), default="node")
    if with_k:
        p.add_argument("--k", type=int, default=8, help="neighbors per node (default 8)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float, help="orientation weight; overrides --env")
    g.add_argument("--env", choices=sorted(ENV_ALPHA), default=None,
                   help="alpha preset: indoor=10 (default), outdoor=200")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=None, help="default: $POSEGNN_SEED or 0")
    p.add_argument("--optimizer", choices=["gd", "adam"], default="gd")
    p.add_argument("--momentum", type=float, default=0.0)
    p.add_argument("--batch-size", type=int, default=1, help="graphs per update in graph mode")
    p.add_argument("--activation", choices=["relu", "none"], default="relu")
    p.add_argument("--widths", type=int, nargs=3, default=[256, 128, 64], metavar="W")
    p.add_argument("--neighbor-init-scale", type=float, default=1.0,
                   help="scale applied to the initial wl neighbor weights")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posegnn", description="Graph neural network camera pose regression.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--mode", choices=sorted(MODES), required=True,
                   help="node: one feature row per image; graph: L x W feature maps")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--d", type=int, default=64)
    p.add_argument("--trajectory", choices=["grid", "loop"], default="grid")
    p.add_argument("--sigma", type=float, default=0.05, help="feature noise std")
    p.add_argument("--smoothness", type=float, default=4.0, help="embedding length scale (m)")
    p.add_argument("--spacing", type=float, default=1.0)
    p.add_argument("--jitter", type=float, default=0.0)
    p.add_argument("--map-l", type=int, default=7)
    p.add_argument("--map-w", type=int, default=7)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_train_flags(p)
    p.add_argument("--out-dir", default=".")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--manifest", default=None, help="default: OUT_DIR/manifest.jsonl")
    p.add_argument("--print-every", type=int, default=10)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="median pose errors of a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", choices=["test", "train"], default="test")
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-k", help="median position error as a function of k")
    _add_train_flags(p, with_k=False)
    p.add_argument("--k-min", type=int, default=1)
    p.add_argument("--k-max", type=int, default=15)
    p.add_argument("--csv", required=True)
    p.add_argument("--dat", default=None, help="also write gnuplot-ready columns")
    p.set_defaults(func=cmd_sweep_k)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "gen":
        defaults = (200, 40) if args.mode == "node" else (60, 20)
        args.n_train = defaults[0] if args.n_train is None else args.n_train
        args.n_test = defaults[1] if args.n_test is None else args.n_test
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"posegnn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Incompatible as exc:
        print(f"posegnn: incompatible: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
