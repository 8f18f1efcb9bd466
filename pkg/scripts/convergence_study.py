"""Convergence of the delayed scheme and agreement with the Picard limit.

    python scripts/convergence_study.py [--out results/convergence] [--ref 512]

For every benchmark scenario this writes ``<name>.csv`` with one row per
resolution N: the sup-in-time gap to the reference run and the observed rate
log2(gap(N)/gap(2N)). A ``summary.csv`` adds the least-squares slope of
log gap against log N and the Picard-vs-reference gap.
"""
from __future__ import annotations

import argparse
import csv
from importlib import resources
from pathlib import Path

import numpy as np

from mfm import io as sio
from mfm.solver import delayed_euler_solve, motion_gap, picard_solve

BENCHMARKS = ("bench_coupled_1d", "bench_coupled_2d", "bench_mixed_2d")


def bundled(name):
    return str(resources.files("mfm") / "scenarios" / f"{name}.json")


def study(name, ladder, ref_N, tol):
    scn = sio.load_scenario(bundled(name))
    ref = delayed_euler_solve(scn, ref_N)
    gaps = [motion_gap(delayed_euler_solve(scn, N), ref)[0] for N in ladder]
    rates = [np.log2(a / b) if b > 0 else float("nan") for a, b in zip(gaps, gaps[1:])] + [float("nan")]
    slope = -np.polyfit(np.log(ladder), np.log(gaps), 1)[0]
    pic = motion_gap(picard_solve(scn.with_(N=max(ladder)), tol=tol), ref)[0]
    return list(zip(ladder, gaps, rates)), float(slope), float(pic)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("results/convergence"))
    ap.add_argument("--ref", type=int, default=512)
    ap.add_argument("--ladder", default="8,16,32,64,128")
    ap.add_argument("--tol", type=float, default=1e-6)
    args = ap.parse_args(argv)
    ladder = [int(s) for s in args.ladder.split(",")]
    args.out.mkdir(parents=True, exist_ok=True)

    summary = []
    for name in BENCHMARKS:
        rows, slope, pic = study(name, ladder, args.ref, args.tol)
        with open(args.out / f"{name}.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "gap", "rate"])
            w.writerows([N, repr(g), repr(r)] for N, g, r in rows)
        summary.append([name, repr(slope), repr(pic)])
        print(f"{name}: slope {slope:.3f}, picard gap {pic:.2e}")
    with open(args.out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "slope", "picard_gap"])
        w.writerows(summary)


if __name__ == "__main__":
    main()
