#!/usr/bin/env python
"""Joint multi-width training against separately trained baselines.

For each seed the same float model seeds four arms: joint training in
conventional and adaptive (alrs) modes over {8, 6, 4, 2}, plus one separately
trained model per width.  Prints a per-seed accuracy table and the across-seed
medians of the per-width deficits and accuracy spreads, and drops each joint
arm's metrics files under the output directory.
"""
import argparse
import statistics
import sys

from bitswitch.experiments import multiprec_comparison
from bitswitch.reports import MetricsRecorder


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--out", default="runs/multiprec")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    results = []
    for seed in seeds:
        recorders = {"conventional": MetricsRecorder(), "alrs": MetricsRecorder()}
        res = multiprec_comparison(seed, epochs=args.epochs, recorders=recorders)
        results.append(res)
        for mode, rec in recorders.items():
            rec.write(f"{args.out}/seed{seed}/{mode}")
        bits = sorted(res.separate, reverse=True)
        print(f"seed {seed} (float {res.float_accuracy:.4f})")
        print("  width     separate  conventional  alrs")
        for b in bits:
            print(f"  {b}-bit     {res.separate[b]:.4f}    "
                  f"{res.one_shot['conventional'][b]:.4f}        "
                  f"{res.one_shot['alrs'][b]:.4f}")
        print(f"  spread              "
              f"{res.spread('conventional'):.4f}        {res.spread('alrs'):.4f}")

    for mode in ("conventional", "alrs"):
        spread = statistics.median(r.spread(mode) for r in results)
        print(f"median spread {mode}: {spread:.4f}")
    for b in (8, 6, 4):
        deficit = statistics.median(r.deficit("alrs", b) for r in results)
        print(f"median alrs deficit at {b}-bit: {deficit:+.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
