#!/usr/bin/env python3
"""Sweep the guidance scale on a text-conditioned checkpoint and print the
relevance/diversity trend table.

Thin wrapper over `motiondiff sweep` with the benchmark protocol defaults
(20 replications, 32 samples each, multimodality pool off for speed).
"""
import argparse
import json
import sys
from pathlib import Path

from motiondiff.cli import main as cli_main


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--ckpt", required=True, type=Path)
    parser.add_argument("--data", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--scales", default="0,1,1.5,2.5,4,7")
    parser.add_argument("--reps", type=int, default=20)
    parser.add_argument("--samples", type=int, default=32)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    code = cli_main([
        "sweep", "--ckpt", str(args.ckpt), "--data", str(args.data),
        "--out", str(args.out), "--scales", args.scales,
        "--reps", str(args.reps), "--samples", str(args.samples),
        "--mm-conditions", "0", "--seed", str(args.seed),
    ])
    if code != 0:
        return code

    data = json.loads((args.out / "sweep.json").read_text())
    relevance = {}
    for row in data["rows"]:
        metric = row["report"]["metrics"].get("r_precision_top3")
        if metric is not None:
            relevance[row["guidance_scale"]] = round(metric["value"], 4)
    print("relevance (top-3) by scale:", relevance)
    return 0


if __name__ == "__main__":
    sys.exit(main())
