"""Command-line entry point: ``xbmeta <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .core import Batch, SimilarityClassifier, finite_diff_grad, init_params, loss_and_grad
from .data import DatasetSpec, generate_dataset, load_dataset, save_dataset
from .ensemble import GwaState, baseline_average, gwa_finalize, gwa_update
from .errors import ConfigError, XbmetaError
from .metrics import evaluate
from .train import TrainConfig, train


def _read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None


def cmd_gen_data(args):
    spec = DatasetSpec.from_dict(_read_json(args.spec))
    dataset = generate_dataset(spec)
    save_dataset(dataset, args.out)
    sizes = {name: len(b) for name, b in dataset.splits.items()}
    print(json.dumps({"out": str(args.out), "splits": sizes}, sort_keys=True))


def cmd_train(args):
    cfg = TrainConfig.from_json(args.config)
    if cfg.dataset_path is not None and not Path(cfg.dataset_path).is_absolute():
        cfg.dataset_path = str(Path(args.config).parent / cfg.dataset_path)
    result = train(cfg, out_dir=args.out)
    print(json.dumps({"out": str(args.out), "epochs": cfg.epochs, "checkpoints": len(result.checkpoints)}))


def _dims_from_layout(layout):
    dims = []
    for name, shape in layout:
        if name.startswith("W"):
            if not dims:
                dims.append(shape[1])
            dims.append(shape[0])
    return dims


def cmd_eval(args):
    theta, info = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    if args.split not in dataset.splits:
        raise ConfigError(f"unknown split {args.split!r}; have {sorted(dataset.splits)}")
    classes = {"base": dataset.base_classes, "novel": dataset.novel_classes,
               "all": dataset.base_classes + dataset.novel_classes}[args.classes]
    scale = info["meta"].get("logit_scale", 10.0)
    clf = SimilarityClassifier(dataset.class_embeddings, _dims_from_layout(theta.layout), scale)
    report = evaluate(theta, clf, dataset.splits[args.split], classes, args.split)
    print(json.dumps(asdict(report), sort_keys=True))


def _trajectory(in_dir):
    d = Path(in_dir)
    if (d / "checkpoints").is_dir():
        d = d / "checkpoints"
    paths = sorted(d.glob("epoch_*.omd1"))
    if not paths:
        raise ConfigError(f"no epoch_*.omd1 checkpoints under {in_dir}")
    loaded = [load_checkpoint(p) for p in paths]
    layout = loaded[0][0].layout
    thetas = []
    for p, (theta, _) in zip(paths, loaded):
        if theta.layout != layout:
            raise ConfigError(f"{p}: layout differs from the first checkpoint")
        thetas.append(theta)
    return thetas, loaded[-1][1]


def cmd_avg(args):
    thetas, info = _trajectory(args.in_dir)
    if args.scheme == "gwa":
        state = GwaState.start(len(thetas), 1, args.mu, args.sigma2)
        for theta in thetas:
            state = gwa_update(state, theta)
        avg = gwa_finalize(state)
    else:
        avg = baseline_average(thetas, args.scheme, args.decay)
    meta = dict(info["meta"], kind=args.scheme, snapshots=len(thetas))
    save_checkpoint(args.out, avg, info["epoch"], info["config_digest"], meta)
    print(json.dumps({"out": str(args.out), "scheme": args.scheme, "snapshots": len(thetas)}))


def grad_check(seed: int, trials: int, h: float = 1e-5):
    """Worst relative error between analytic and finite-difference gradients."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        d_x = int(rng.integers(1, 9))
        k = int(rng.integers(2, 7))
        b = int(rng.integers(1, 9))
        d_e = int(rng.integers(1, 6))
        hidden = [int(w) for w in rng.integers(1, 6, size=rng.integers(0, 3))]
        emb = rng.normal(size=(k, d_e))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        clf = SimilarityClassifier(emb, [d_x, *hidden, d_e], float(rng.uniform(1, 20)))
        p = init_params(clf, int(rng.integers(2**31)))
        p = p.with_values(p.values + 0.5 * rng.normal(size=len(p)))
        batch = Batch(rng.normal(size=(b, d_x)), rng.integers(0, k, size=b), np.arange(b))
        _, g = loss_and_grad(p, batch, clf)
        fd = finite_diff_grad(p, batch, clf, h)
        err = np.linalg.norm(g.values - fd.values) / max(np.linalg.norm(fd.values), 1e-12)
        worst = max(worst, float(err))
    return worst


def cmd_grad_check(args):
    worst = grad_check(args.seed, args.trials)
    ok = worst < args.tol
    print(json.dumps({"trials": args.trials, "max_rel_error": worst, "pass": ok}))
    if not ok:
        raise XbmetaError(f"gradient check failed: max relative error {worst:.3e} >= {args.tol:g}")


def build_parser():
    p = argparse.ArgumentParser(prog="xbmeta", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="generate a synthetic dataset")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", required=True)
    s.add_argument("--classes", choices=("base", "novel", "all"), default="all")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("avg", help="average a run's epoch checkpoints")
    s.add_argument("--scheme", choices=("gwa", "uniform", "ema"), required=True)
    s.add_argument("--mu", type=float, default=None)
    s.add_argument("--sigma2", type=float, default=10.0)
    s.add_argument("--decay", type=float, default=0.9)
    s.add_argument("--in", dest="in_dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_avg)

    s = sub.add_parser("grad-check", help="compare analytic and finite-difference gradients")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--trials", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-6)
    s.set_defaults(fn=cmd_grad_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.fn(args)
    except (XbmetaError, OSError, KeyError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"xbmeta {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
