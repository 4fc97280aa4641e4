#!/usr/bin/env python3
"""Train paired models differing only in the foot-contact loss weight,
sample both, and report foot-skate medians.

The two runs share every flag and the seed; only --lambda-foot differs
(0 vs 1, with position and velocity losses on in both). The summary JSON
reports the per-arm foot-skate median over the sampled clips.
"""
import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))
from run_desk_pipeline import generate_action_samples, skate_stats  # noqa: E402

from motiondiff.cli import main as cli_main  # noqa: E402


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--data", required=True, type=Path)
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--steps", type=int, default=4000)
    parser.add_argument("--samples", type=int, default=100)
    parser.add_argument("--frames", type=int, default=48)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)

    arms = {}
    for arm, lam in (("without_foot_loss", 0), ("with_foot_loss", 1)):
        run = args.out / arm
        code = cli_main([
            "train", "--data", str(args.data), "--out", str(run),
            "--cond", "action", "--steps", str(args.steps),
            "--seed", str(args.seed), "--lambda-pos", "1",
            "--lambda-vel", "1", "--lambda-foot", str(lam),
        ])
        if code != 0:
            return code
        generate_action_samples(run / "last.ckpt", run / "samples",
                                args.samples, args.frames, seed=args.seed)
        arms[arm] = skate_stats(run / "samples")
        print(f"{arm}: median foot skate {arms[arm]['median']:.5f} m/frame")

    summary = {
        "steps": args.steps,
        "samples_per_arm": args.samples,
        "frames": args.frames,
        "foot_skate": arms,
    }
    (args.out / "summary.json").write_text(
        json.dumps(summary, indent=1, sort_keys=True) + "\n"
    )
    lower = arms["with_foot_loss"]["median"] < arms["without_foot_loss"]["median"]
    print(f"foot loss lowers the median: {lower}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
