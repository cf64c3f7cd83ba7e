"""Command-line front end.

    segtide verify  [--preset desk] [--seed N]
    segtide train   [--task local-lm|planted-recall] [--steps N] [--k N]
    segtide eval    --checkpoint PATH
    segtide sweep   --preset ablate-alignment|ablate-capacity|ablate-longrange
    segtide cost    [--preset desk|paper]

Common flags: --config PATH (full config file), --preset NAME, --seed N,
--out DIR, --steps N, --k N. Flag values override the config file, which
overrides the preset.
"""

from __future__ import annotations

import argparse
import sys

from .experiments import ExperimentSpec, run_eval, run_experiment, run_train


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", default=None, help="config file (canonical key=value format)")
    p.add_argument("--preset", default=None, help="base config preset (desk, paper) or sweep name")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory for CSVs and checkpoints")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--k", type=int, default=None, help="TBPTT truncation depth override")
    p.add_argument("--sample-len", type=int, default=64)
    p.add_argument("--eval-samples", type=int, default=16)
    p.add_argument("--seeds", type=int, default=3, help="seed count for sweep presets")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="segtide")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("verify", "train", "eval", "sweep", "cost"):
        p = sub.add_parser(name)
        _common(p)
        if name == "train":
            p.add_argument("--task", default="local-lm", choices=["local-lm", "planted-recall"])
        if name == "eval":
            p.add_argument("--checkpoint", required=True)
    return ap


def _spec(args, preset: str) -> ExperimentSpec:
    overrides = {}
    if args.k is not None:
        overrides["tbptt_depth"] = args.k
    return ExperimentSpec(
        preset=preset,
        overrides=overrides,
        steps=args.steps,
        seed=args.seed,
        n_seeds=args.seeds,
        out_dir=args.out,
        k=args.k,
        sample_len=args.sample_len,
        eval_samples=args.eval_samples,
        base=args.preset if args.preset in ("desk", "paper") else "desk",
        config_path=args.config,
        task=getattr(args, "task", "local-lm"),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "verify":
            return run_experiment(_spec(args, "verify"))
        if args.command == "train":
            return run_train(_spec(args, "train"))
        if args.command == "eval":
            return run_eval(_spec(args, "eval"), args.checkpoint)
        if args.command == "cost":
            return run_experiment(_spec(args, "cost-sweep"))
        if args.command == "sweep":
            if args.preset is None:
                print("sweep requires --preset", file=sys.stderr)
                return 2
            return run_experiment(_spec(args, args.preset))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
