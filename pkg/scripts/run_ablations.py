#!/usr/bin/env python3
"""Generate a two-domain training set and emit every ablation table.

Produces table_a/c/d (matcher suite), table_e + decoder_wirings (decoder
suite) and table_f (token sweep) under the output directory.  Numbers are
desk-scale; the row and column structure is the deliverable.

Usage: python scripts/run_ablations.py --out runs/ablations [--steps 120]
"""

import argparse
import os
import sys

from vlpose.cli import main as vlpose_main

MODEL_CONFIG = """
height = 128
width = 96
patch = 16
channels = 48
depth = 2
heads = 4
drop_path = 0.0
text_tokens = 8
text_dim = 64
batch = 8
lr = 2e-3
"""


def run(*argv):
    code = vlpose_main(list(argv))
    if code != 0:
        raise SystemExit(f"command failed ({code}): vlpose {' '.join(argv)}")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--steps", type=int, default=120, help="training steps per table cell")
    parser.add_argument("--n-train", type=int, default=32)
    parser.add_argument("--n-eval", type=int, default=24)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    os.makedirs(args.out, exist_ok=True)
    cfg = os.path.join(args.out, "model.cfg")
    with open(cfg, "w", encoding="utf-8") as fh:
        fh.write(MODEL_CONFIG + f"steps = {args.steps}\nseed = {args.seed}\n")

    train_dir = os.path.join(args.out, "train_data")
    eval_dir = os.path.join(args.out, "eval_data")
    run("gen", "--domain", "all", "--n", str(args.n_train), "--seed", str(args.seed + 100),
        "--out", train_dir, "--canvas", "160")
    run("gen", "--domain", "all", "--n", str(args.n_eval), "--seed", str(args.seed + 200),
        "--out", eval_dir, "--canvas", "160")

    for suite in ("matcher", "decoder", "tokens"):
        run("ablate", "--suite", suite,
            "--data", os.path.join(train_dir, "annotations.json"),
            "--eval-data", os.path.join(eval_dir, "annotations.json"),
            "--out", os.path.join(args.out, suite), "--config", cfg)
    print(f"tables under {args.out}/{{matcher,decoder,tokens}}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
