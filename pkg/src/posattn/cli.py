"""Command-line entry point: ``python -m posattn <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import compiler, harness, ood, pcoc
from .tasks import TASKS, dump_jsonl, sample_test_ood, sample_train


def load_config(path) -> dict:
    """Key-value config document: JSON, or YAML when PyYAML is installed."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: expected a mapping at top level")
    return doc


def _train_config(args) -> harness.TrainConfig:
    doc = load_config(args.config) if args.config else {}
    overrides = {
        "task": args.task,
        "attention": args.attn,
        "n": args.n,
        "samples": args.samples,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "variable_length": args.variable_length or None,
        "seed": args.seed,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    return harness.TrainConfig.from_dict(doc)


def _instance(args) -> pcoc.PCOCInstance:
    if args.instance:
        return pcoc.from_description(json.loads(Path(args.instance).read_text()))
    if not args.alg or not args.n:
        raise SystemExit("pass --instance FILE or both --alg and --n")
    return pcoc.BUILDERS[args.alg](args.n)


def _emit(text: str, out: str | None, name: str) -> None:
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = args.out or f"runs/{cfg.attention}_{cfg.task}_n{cfg.n}_seed{cfg.seed}"
    if args.ood_scales:
        manifest = harness.run_with_ood(cfg, out, args.ood_scales, args.test_samples)
    else:
        manifest, _ = harness.train(cfg, out_dir=out)
    last = manifest.metrics[-1]
    print(json.dumps({"out": out, "status": manifest.status, "best_epoch": manifest.best_epoch, **last}))
    return 0 if manifest.status == "completed" else 1


def cmd_ood_sweep(args) -> int:
    manifest, params = harness.load_run(args.run)
    cfg = manifest.config
    seed = cfg.seed if args.seed is None else args.seed
    manifest.ood = harness.ood_sweep(params, cfg.task, args.scales, args.samples, seed, cfg.variable_length)
    harness.write_run(manifest, params, args.out or args.run)
    sys.stdout.write(harness.to_csv(manifest.ood, harness.OOD_FIELDS))
    return 0


SWEEP_FIELDS = ("attention", "task", "n", "num_layers", "samples", "seed", "scale", "train_mse", "val_mse", "ood_mse")


def _sweep_base(args) -> harness.TrainConfig:
    base = harness.TrainConfig.from_dict(load_config(args.config)) if args.config else harness.TrainConfig()
    base.task = args.task
    if args.epochs is not None:
        base.epochs = args.epochs
    elif not args.config:
        base.epochs = 500
    return base


def cmd_size_sweep(args) -> int:
    seeds = args.seeds if args.seed is None else [args.seed]
    rows = harness.sample_size_sweep(args.task, args.sizes, args.c, seeds, args.attn, _sweep_base(args),
                                     args.test_samples, args.workers)
    _emit(harness.to_csv(rows, SWEEP_FIELDS), args.out, "size_sweep.csv")
    return 0


def cmd_length_sweep(args) -> int:
    seeds = args.seeds if args.seed is None else [args.seed]
    rows = harness.length_sweep(args.task, args.ns, args.c, seeds, args.attn, _sweep_base(args),
                                args.test_samples, args.workers)
    _emit(harness.to_csv(rows, SWEEP_FIELDS), args.out, "length_sweep.csv")
    return 0


def cmd_pcoc(args) -> int:
    P = _instance(args)
    if args.action == "validate":
        report = pcoc.validate(P)
        print(json.dumps(asdict(report)))
        return 0 if report.ok else 1
    if args.input:
        x = np.asarray(args.input, dtype=np.float64)
    else:
        x = np.random.default_rng(args.seed or 0).uniform(-2.0, 2.0, P.N)
    try:
        mem, log = pcoc.run(P, x, trace=True)
    except pcoc.InvalidInstanceError as exc:
        print(f"invalid instance: {exc}", file=sys.stderr)
        return 1
    doc = {"input": x.tolist(), "memory": mem.tolist()}
    if args.trace:
        doc["trace"] = log
    _emit(json.dumps(doc, indent=1), args.out, "pcoc_run.json")
    return 0


def cmd_compile_verify(args) -> int:
    P = _instance(args)
    net = compiler.compile(P, args.eps)
    report = compiler.verify(net, P, trials=args.trials, tol=args.tol, seed=args.seed or 0)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        net.save(Path(args.out) / "compiled.json")
    print(json.dumps({"instance": P.name, "N": P.N, "eps": args.eps, **report.to_dict()}))
    return 0 if report.passed else 1


def cmd_ood_prob(args) -> int:
    rows = []
    for n in args.n:
        for c in args.c:
            row = {"n": n, "c": c, "p_in_upper": ood.p_in_bound(n, c).p_in_upper}
            if args.monte_carlo:
                est = ood.monte_carlo_p_in(n, c, args.monte_carlo, args.seed or 0)
                row.update(mc_estimate=est.estimate, mc_half_width=est.half_width)
            rows.append(row)
    _emit(harness.to_csv(rows, list(rows[0])), args.out, "ood_prob.csv")
    return 0


def cmd_attn_dump(args) -> int:
    if args.run:
        _, params = harness.load_run(args.run)
    else:
        from .model import load_checkpoint

        params = load_checkpoint(args.checkpoint)
    n = params.config.max_len
    if args.input:
        x = np.asarray(args.input, dtype=np.float64)
    else:
        x = np.random.default_rng(args.seed or 0).uniform(-2.0, 2.0, n)
    _emit(json.dumps(ood.attn_dump(params, x, args.scales)), args.out, "attention.json")
    return 0


def cmd_gen_data(args) -> int:
    length = None if args.variable_length else args.n
    seed = args.seed or 0
    if args.c == 1:
        batches = sample_train(args.task, args.n, args.count, seed, length=length)
    else:
        batches = sample_test_ood(args.task, args.n, args.count, args.c, seed, length=length)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{args.task}_n{args.n}_c{args.c:g}_seed{seed}.jsonl"
    dump_jsonl(batches, path)
    print(path)
    return 0


# --------------------------------------------------------------------------
# parser


def _globals(parser: argparse.ArgumentParser, default) -> None:
    parser.add_argument("--seed", type=int, default=default)
    parser.add_argument("--config", default=default, help="JSON or YAML file of training fields")
    parser.add_argument("--out", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="posattn", description="Positional-attention experiments.")
    _globals(ap, None)
    ap.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    _globals(common, argparse.SUPPRESS)
    sub = ap.add_subparsers(dest="command", required=True)
    task_names = [t.value for t in TASKS]
    algs = sorted(pcoc.BUILDERS)

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--task", choices=task_names)
    p.add_argument("--attn", choices=["positional", "self", "self_rope"])
    p.add_argument("--n", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--variable-length", action="store_true")
    p.add_argument("--ood-scales", type=float, nargs="*")
    p.add_argument("--test-samples", type=int, default=1000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ood-sweep", parents=[common], help="per-scale OOD MSE of a trained run")
    p.add_argument("--run", required=True)
    p.add_argument("--scales", type=float, nargs="+", default=list(range(1, 11)))
    p.add_argument("--samples", type=int, default=1000)
    p.set_defaults(func=cmd_ood_sweep)

    for name, func, axis, default in (
        ("size-sweep", cmd_size_sweep, "--sizes", [5000, 10000, 20000, 30000, 40000, 50000]),
        ("length-sweep", cmd_length_sweep, "--ns", [2, 4, 8, 16, 32]),
    ):
        p = sub.add_parser(name, parents=[common], help=f"train a grid over {axis[2:]}")
        p.add_argument("--task", choices=task_names, required=True)
        p.add_argument(axis, type=int, nargs="+", default=default)
        p.add_argument("--c", type=float, default=3.0)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        p.add_argument("--attn", nargs="+", default=["positional", "self"])
        p.add_argument("--epochs", type=int)
        p.add_argument("--test-samples", type=int, default=1000)
        p.add_argument("--workers", type=int, default=1)
        p.set_defaults(func=func)

    p = sub.add_parser("pcoc", parents=[common], help="run or validate a parallel algorithm")
    p.add_argument("action", choices=["run", "validate"])
    p.add_argument("--alg", choices=algs)
    p.add_argument("--n", type=int)
    p.add_argument("--instance", help="JSON instance description")
    p.add_argument("--input", type=float, nargs="+")
    p.add_argument("--trace", action="store_true")
    p.set_defaults(func=cmd_pcoc)

    p = sub.add_parser("compile-verify", parents=[common], help="compile an algorithm and check it")
    p.add_argument("--alg", choices=algs)
    p.add_argument("--n", type=int)
    p.add_argument("--instance")
    p.add_argument("--eps", type=float, default=1e-8)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tol", type=float)
    p.set_defaults(func=cmd_compile_verify)

    p = sub.add_parser("ood-prob", parents=[common], help="bound on in-range OOD draws, as CSV")
    p.add_argument("--n", type=int, nargs="+", default=[2, 4, 8, 16, 32])
    p.add_argument("--c", type=float, nargs="+", default=list(range(2, 11)))
    p.add_argument("--monte-carlo", type=int, metavar="TRIALS")
    p.set_defaults(func=cmd_ood_prob)

    p = sub.add_parser("attn-dump", parents=[common], help="attention matrices at several input scales")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--run")
    src.add_argument("--checkpoint")
    p.add_argument("--input", type=float, nargs="+")
    p.add_argument("--scales", type=float, nargs="+", default=[1, 2, 4, 8])
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("gen-data", parents=[common], help="write samples as JSON lines")
    p.add_argument("--task", choices=task_names, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--count", type=int, default=1000)
    p.add_argument("--c", type=float, default=1.0, help="1 for the training sampler")
    p.add_argument("--variable-length", action="store_true")
    p.set_defaults(func=cmd_gen_data)
    return ap


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli())
