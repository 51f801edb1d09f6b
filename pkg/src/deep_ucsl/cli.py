"""Command-line front end.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data, metrics, nn
from .clustering import DegenerateClusteringError, SkConfig
from .trainer import TrainConfig, TrainHistory, train, train_baseline_bce_kmeans

log = logging.getLogger("deep_ucsl")


class UsageError(Exception):
    """Invalid input or configuration (exit code 2)."""


def _int_list(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _add_model_flags(p):
    g = p.add_argument_group("model")
    g.add_argument("--k", type=int, default=2, help="number of subgroups K")
    g.add_argument("--hidden", type=_int_list, default=(64, 64), help="hidden widths, e.g. 64,64")
    g.add_argument("--repr-dim", type=int, default=32)
    g.add_argument("--activation", choices=("relu", "tanh"), default="relu")


def _add_train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=64)
    g.add_argument("--lr", type=float, default=1e-3)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--optimizer", choices=("adam", "sgd_momentum"), default="adam")
    g.add_argument("--w-moe", type=float, default=1.0)
    g.add_argument("--w-clu", type=float, default=1.0)
    g.add_argument("--epsilon", type=float, default=0.05, help="Sinkhorn-Knopp temperature")
    g.add_argument("--sk-iters", type=int, default=100)
    g.add_argument("--kmeans-iters", type=int, default=10)
    g.add_argument("--sk-tol", type=float, default=1e-6)
    g.add_argument("--reident-epsilon", type=float, default=0.01)
    g.add_argument("--full-batch", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="deep-ucsl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/test CSVs")
    g.add_argument("--n-pos", type=int, default=400)
    g.add_argument("--n-neg", type=int, default=400)
    g.add_argument("--k", type=int, default=2)
    g.add_argument("--d-shared", type=int, default=8)
    g.add_argument("--d-spec", type=int, default=2)
    g.add_argument("--nuisance-scale", type=float, default=3.0)
    g.add_argument("--subgroup-separation", type=float, default=1.0)
    g.add_argument("--noise-sigma", type=float, default=0.3)
    g.add_argument("--mix", choices=("none", "random_rotation"), default="random_rotation")
    g.add_argument("--out", type=Path, help="output directory (required)")

    t = sub.add_parser("train", help="train Deep UCSL or the BCE + K-means baseline")
    t.add_argument("--mode", choices=("deep-ucsl", "bce-kmeans"), default="deep-ucsl")
    t.add_argument("--train", type=Path, dest="train_path", help="training CSV (required)")
    t.add_argument("--eval", type=Path, dest="eval_path")
    t.add_argument("--out", type=Path, default=Path("run"), help="output directory")
    _add_model_flags(t)
    _add_train_flags(t)

    e = sub.add_parser("eval", help="class / subgroup / overall balanced accuracy")
    e.add_argument("--checkpoint", type=Path)
    e.add_argument("--data", type=Path)
    e.add_argument("--subgroup-source", choices=("head", "centroids"))
    e.add_argument("--out", type=Path, help="also write the key=value report here")

    pr = sub.add_parser("predict", help="per-sample predictions as CSV")
    pr.add_argument("--checkpoint", type=Path)
    pr.add_argument("--data", type=Path)
    pr.add_argument("--subgroup-source", choices=("head", "centroids"))
    pr.add_argument("--out", type=Path)

    pj = sub.add_parser("project", help="PCA coordinates of encoded representations")
    pj.add_argument("--checkpoint", type=Path)
    pj.add_argument("--fit-on", type=Path)
    pj.add_argument("--apply-on", type=Path)
    pj.add_argument("--dims", type=int, choices=(2, 3), default=2)
    pj.add_argument("--out", type=Path)

    for p in (g, t, e, pr, pj):
        p.add_argument("--seed", type=int, default=None, help="falls back to $UCSL_SEED, then 0")
        p.add_argument("--config", type=Path, help="key=value file; flags override it")
    return parser


# checked after the config file is merged, so the file may supply them too
REQUIRED = {
    "gen-data": ("out",),
    "train": ("train_path",),
    "eval": ("checkpoint", "data"),
    "predict": ("checkpoint", "data", "out"),
    "project": ("checkpoint", "fit_on", "out"),
}


def read_config_file(path):
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        file_values = read_config_file(args.config)
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in file_values.items():
            dest = {"train": "train_path", "eval": "eval_path"}.get(key, key)
            if dest not in known:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            action = known[dest]
            if isinstance(action, argparse._StoreTrueAction):
                defaults[dest] = raw.lower() in ("1", "true", "yes", "on")
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    missing = [d for d in REQUIRED[args.command] if getattr(args, d) is None]
    if missing:
        flags = ", ".join("--" + {"train_path": "train"}.get(d, d).replace("_", "-") for d in missing)
        raise UsageError(f"{args.command}: missing required {flags}")
    if args.seed is None:
        env = os.environ.get("UCSL_SEED")
        try:
            args.seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"UCSL_SEED must be an integer, got {env!r}") from None
    return args


def _load_dataset(path):
    try:
        return data.load_dataset(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_checkpoint(path):
    try:
        return data.load_checkpoint(path)
    except FileNotFoundError:
        raise UsageError(f"no such file: {path}") from None
    except ValueError as exc:
        raise UsageError(f"{path}: {exc}") from None


def _check_width(ckpt, dataset, path):
    if dataset.X.shape[1] != ckpt.model_cfg.input_dim:
        raise UsageError(
            f"{path} has {dataset.X.shape[1]} features but the checkpoint model expects "
            f"input_dim={ckpt.model_cfg.input_dim} (X shape {dataset.X.shape})"
        )


def cmd_gen_data(args):
    try:
        cfg = data.SynthConfig(
            n_pos=args.n_pos, n_neg=args.n_neg, k=args.k, d_shared=args.d_shared,
            d_spec=args.d_spec, nuisance_scale=args.nuisance_scale,
            subgroup_separation=args.subgroup_separation, noise_sigma=args.noise_sigma,
            mix=args.mix, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    args.out.mkdir(parents=True, exist_ok=True)
    for stream, name in ((1, "train.csv"), (2, "test.csv")):
        ds = data.gen_synthetic(cfg, stream=stream)
        data.save_dataset(ds, args.out / name)
        print(f"{name}: N={len(ds)} D={ds.X.shape[1]} K={cfg.k} positives={ds.positives.size} controls={ds.controls.size}")
    return 0


def _configs(args, input_dim):
    try:
        model_cfg = nn.ModelConfig(
            input_dim=input_dim, hidden_dims=args.hidden, repr_dim=args.repr_dim,
            k_subgroups=args.k, activation=args.activation, seed=args.seed,
        )
        sk = SkConfig(args.epsilon, args.sk_iters, args.kmeans_iters, args.sk_tol)
        train_cfg = TrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
            momentum=args.momentum, optimizer=args.optimizer, w_moe=args.w_moe,
            w_clu=args.w_clu, sk=sk, full_batch=args.full_batch,
            reident_epsilon=args.reident_epsilon, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return model_cfg, train_cfg


def cmd_train(args):
    dataset = _load_dataset(args.train_path)
    eval_set = _load_dataset(args.eval_path) if args.eval_path else None
    model_cfg, train_cfg = _configs(args, dataset.X.shape[1])
    if dataset.positives.size < model_cfg.k_subgroups or dataset.controls.size < 1:
        raise UsageError(f"training set needs >= {model_cfg.k_subgroups} positives and >= 1 control")
    args.out.mkdir(parents=True, exist_ok=True)
    if args.mode == "deep-ucsl":
        params, centroids, history = train(dataset, model_cfg, train_cfg)
    else:
        params, centroids = train_baseline_bce_kmeans(dataset, model_cfg, train_cfg)
        history = TrainHistory()
    ckpt = data.Checkpoint(
        model_cfg, params, centroids, mode=args.mode, train_digest=data.config_digest(train_cfg)
    )
    if eval_set is not None:
        _check_width(ckpt, eval_set, args.eval_path)
        report = metrics.evaluate(params, eval_set, centroids, ckpt.subgroup_source)
        ckpt.metrics = {"class_bacc": report.class_bacc, "subgroup_bacc": report.subgroup_bacc,
                        "overall_bacc": report.overall_bacc}
        sys.stdout.write(report.to_kv())
    data.save_checkpoint(ckpt, args.out / "model.ckpt")
    (args.out / "history.csv").write_text(history.to_csv())
    if len(history):
        last = history.records[-1]
        print(f"trained {args.mode}: epochs={len(history)} final elbo={last.elbo:.6g} "
              f"equidistance_ratio={last.equidistance_ratio:.4g}")
    print(f"checkpoint written to {args.out / 'model.ckpt'}")
    return 0


def _source(args, ckpt):
    return args.subgroup_source or ckpt.subgroup_source


def cmd_eval(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    _check_width(ckpt, dataset, args.data)
    if dataset.c is None or np.any(dataset.c[dataset.positives] < 0):
        raise UsageError(f"{args.data}: every disease row needs a subgroup label c >= 0")
    try:
        report = metrics.evaluate(ckpt.params, dataset, ckpt.centroids, _source(args, ckpt))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    text = report.to_kv()
    sys.stdout.write(text)
    if args.out:
        args.out.write_text(text)
    return 0


def cmd_predict(args):
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.data)
    _check_width(ckpt, dataset, args.data)
    pred = metrics.predict(ckpt.params, dataset.X, ckpt.centroids, _source(args, ckpt))
    k = pred.subgroup_probs.shape[1]
    lines = [",".join(["p_disease", "y_pred", "c_pred"] + [f"q{j}" for j in range(k)])]
    for p, yc, cc, row in zip(pred.p_disease, pred.hard_class, pred.hard_subgroup, pred.subgroup_probs):
        lines.append(",".join([repr(float(p)), f"{int(yc):+d}", str(int(cc))] + [repr(float(v)) for v in row]))
    args.out.write_text("\n".join(lines) + "\n")
    print(f"{len(dataset)} predictions written to {args.out}")
    return 0


def cmd_project(args):
    ckpt = _load_checkpoint(args.checkpoint)
    fit_set = _load_dataset(args.fit_on)
    apply_set = _load_dataset(args.apply_on) if args.apply_on else fit_set
    _check_width(ckpt, fit_set, args.fit_on)
    _check_width(ckpt, apply_set, args.apply_on or args.fit_on)
    z_fit = nn.encode(ckpt.params, fit_set.X)
    z_apply = nn.encode(ckpt.params, apply_set.X)
    coords, explained = data.pca_project(z_apply, args.dims, fit_on=z_fit)
    data.save_projection(coords, apply_set, args.out)
    print("explained_variance=" + ",".join(f"{v:.6g}" for v in explained))
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "project": cmd_project,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FloatingPointError, DegenerateClusteringError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
