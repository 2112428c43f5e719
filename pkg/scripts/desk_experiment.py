"""Synthetic data -> masks -> cross-validated training -> evaluation, through the CLI.

    python scripts/desk_experiment.py --out runs/desk --folds 4
    python scripts/desk_experiment.py --out runs/quick --fold 0 --epochs 10

Prints the fold-averaged report table at the end.
"""

import argparse
import sys
import time
from pathlib import Path

from hierseg.cli import main as hierseg


def run(*argv):
    code = hierseg(list(map(str, argv)))
    if code:
        sys.exit(f"hierseg {argv[0]} failed with exit code {code}")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--patients", type=int, default=8)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--overlap", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--folds", type=int, default=4)
    p.add_argument("--fold", type=int, help="train a single fold instead of all of them")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--optimizer", choices=("sgd", "adamw"), default="sgd")
    args = p.parse_args()

    data, run_dir, eval_dir = args.out / "data", args.out / "run", args.out / "eval"
    start = time.perf_counter()
    run("synth", "--patients", args.patients, "--size", args.size, "--overlap", args.overlap,
        "--seed", args.seed, "--out", data)
    run("gen-masks", "--data", data)
    train = ["train", "--data", data, "--out", run_dir, "--folds", args.folds, "--seed", args.seed,
             "--epochs", args.epochs, "--optimizer", args.optimizer]
    if args.fold is not None:
        train += ["--fold", args.fold]
    run(*train)
    run("eval", "--data", data, "--weights", run_dir, "--out", eval_dir, "--save-predictions")
    run("render", "--pred", eval_dir / "predictions", "--target", data, "--images", data,
        "--out", eval_dir / "overlays")
    print((eval_dir / "report.txt").read_text(), end="")
    print(f"wall time {time.perf_counter() - start:.0f}s, outputs in {args.out}")


if __name__ == "__main__":
    main()
