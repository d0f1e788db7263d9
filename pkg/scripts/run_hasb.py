#!/usr/bin/env python
"""Sensitivity-weighted bit switching against a uniform-roulette control.

Each seed trains two supernets from one float model — one whose random
per-layer widths favor wide bits on high-Hessian-trace layers, one that draws
widths uniformly — then scores the same searched width assignments on both at
several average widths.  Prints the best accuracy per (arm, average width)
and the across-seed medians, and writes one pareto CSV per arm and seed.
"""
import argparse
import os
import statistics
import sys

from bitswitch.experiments import hasb_comparison
from bitswitch.reports import write_pareto


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--avg-widths", default="3,4,5")
    ap.add_argument("--out", default="runs/hasb")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    widths = [int(w) for w in args.avg_widths.split(",")]

    results = []
    for seed in seeds:
        res = hasb_comparison(seed, epochs=args.epochs, avg_widths=tuple(widths))
        results.append(res)
        mean = res.profile.mean_trace
        traces = ", ".join(
            f"L{i}={t:.3g}{'*' if t >= mean else ''}"
            for i, t in zip(res.profile.layer_indices, res.profile.traces))
        print(f"seed {seed}  traces: {traces}  (* = sensitive)")
        for arm in res.arms:
            row = "  ".join(f"{w}b {res.best(arm, w):.4f}" for w in widths)
            print(f"  {arm:8s} {row}")
            os.makedirs(f"{args.out}/seed{seed}", exist_ok=True)
            scored = [a for w in widths for a in res.evaluated[arm][w]]
            write_pareto(f"{args.out}/seed{seed}/{arm}-pareto.csv", scored)

    wins = 0
    for w in widths:
        hes = statistics.median(r.best("hessian", w) for r in results)
        uni = statistics.median(r.best("uniform", w) for r in results)
        mark = ">=" if hes >= uni else "< "
        wins += hes >= uni
        print(f"avg {w}-bit: hessian {hes:.4f} {mark} uniform {uni:.4f}")
    print(f"sensitivity-weighted arm matches or beats control at {wins}/{len(widths)} widths")
    return 0


if __name__ == "__main__":
    sys.exit(main())
