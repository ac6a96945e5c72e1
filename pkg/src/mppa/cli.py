"""Command-line entry point: ``mppa {datagen,train,eval,ablate,audit,gradcheck}``.

Exit status is 0 on success, 1 when an audit, gradient check or training run
fails, and 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from mppa.config import RunConfig, load_run_config
from mppa.harness import (
    GRAD_TOLERANCE,
    TrainingError,
    ablate,
    audit_causality,
    check_gradients,
    evaluate,
    format_table,
    train,
)
from mppa.model import COMPONENTS
from mppa.physics import generate_dataset

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config file (INI with [model]/[optimizer]/[data]/[output])")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--out", help="output path")
    p.add_argument("--gating", choices=("causal_prefix", "sequence_mean"), help="gate summary mode")
    p.add_argument("--disable", action="append", default=[], choices=COMPONENTS, help="disable a component (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mppa", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("datagen", help="generate a physics token dataset")
    _common(p)
    p.add_argument("--split", choices=("train", "val"), default="train")

    p = sub.add_parser("train", help="train a model")
    _common(p)

    for name, text in (("eval", "evaluate a checkpoint"), ("ablate", "full model vs single-component ablations")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", help="checkpoint path (default: [output] checkpoint_path)")
        p.add_argument("--dataset", help="dataset path (default: [data] val_path)")
        p.add_argument("--completions", type=int, help="sequences to greedy-decode for trajectory metrics")

    p = sub.add_parser("audit", help="causality audit on a randomly initialised model")
    _common(p)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--length", type=int, default=64)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _common(p)
    p.add_argument("--length", type=int, default=None, help="sequence length (default 2*C+1)")
    return parser


def _load(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig(base_dir=os.getcwd())
    model = cfg.model
    if args.gating:
        model = dataclasses.replace(model, gating=args.gating)
    if args.disable and args.command not in ("eval",):
        model = model.with_disabled(args.disable)
    if args.seed is not None and args.command == "train":
        cfg = cfg.replace(optimizer=dataclasses.replace(cfg.optimizer, seed=args.seed))
    return cfg.replace(model=model)


def _write(path: str | None, text: str) -> None:
    if path:
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def run(args) -> int:
    cfg = _load(args)
    cmd = args.command
    if cmd == "datagen":
        split = args.split
        seed = args.seed if args.seed is not None else (cfg.data.train_seed if split == "train" else cfg.data.val_seed)
        out = args.out or cfg.path(cfg.data.train_path if split == "train" else cfg.data.val_path)
        os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
        manifest = generate_dataset(cfg.data.domain(split, cfg.seq_len), seed, out)
        print(f"wrote {manifest['count']} sequences to {out}")
        return 0
    if cmd == "train":
        if args.out:
            cfg = cfg.replace(output=dataclasses.replace(cfg.output, metrics_path=os.path.abspath(args.out)))
        record, _ = train(cfg)
        print(record.to_json())
        return 0
    if cmd in ("eval", "ablate"):
        ckpt = args.checkpoint or cfg.path(cfg.output.checkpoint_path)
        data = args.dataset or cfg.path(cfg.data.val_path)
        if cmd == "eval":
            rec = evaluate(ckpt, data, cfg, disable=args.disable, gating=args.gating, completions=args.completions)
            _write(args.out, rec.to_json() + "\n")
        else:
            rows = ablate(ckpt, data, cfg, completions=args.completions)
            _write(args.out, format_table(rows))
        return 0
    if cmd == "audit":
        report = audit_causality(cfg.model, trials=args.trials, seed=args.seed or 0, n=args.length)
        _write(args.out, "\n".join(report.lines()) + "\n")
        if not report.ok:
            failing = {k: v[0] for k, v in report.failing_seeds.items() if v}
            print(f"causality violations; first offending trial seeds: {failing}", file=sys.stderr)
            return 1
        return 0
    if cmd == "gradcheck":
        report = check_gradients(cfg.model, seed=args.seed or 0, n=args.length)
        lines = [f"{'FAIL' if err >= GRAD_TOLERANCE else 'ok  '} {name} max_rel_err={err:.3e} at {idx}" for name, (err, idx) in report.items()]
        _write(args.out, "\n".join(lines) + "\n")
        return 1 if any(err >= GRAD_TOLERANCE for err, _ in report.values()) else 0
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return run(args)
    except (ValueError, OSError) as exc:
        # ConfigError, MismatchError and CheckpointError are ValueErrors
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
