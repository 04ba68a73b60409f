#!/usr/bin/env python3
"""Compare acquisition methods in the simulated active-learning loop.

Runs every (method, seed) pair on the default synthetic world, writes the
learning curves to CSV and prints final-cycle mAP per method along with the
pairwise win counts used to judge the ordering between methods.

    python scripts/closed_loop.py --seeds 0,1,2,3,4 --out results/loop
"""
import argparse
import csv
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from tcal.simulator import LOOP_METHODS, LoopConfig, WorldConfig, generate_world, run_loop


def run_one(args):
    method, seed, cycles, budget = args
    world = generate_world(WorldConfig(seed=seed, frames_min=150, frames_max=250))
    return run_loop(world, method, LoopConfig(cycles=cycles, budget_per_cycle=budget), seed)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--methods", default="random,random_r,tc,oracle_fp")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--budget", type=float, default=0.02)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", default="results/closed_loop")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    methods = args.methods.split(",")
    unknown = set(methods) - set(LOOP_METHODS)
    if unknown:
        p.error(f"unknown methods: {', '.join(sorted(unknown))}")
    seeds = [int(s) for s in args.seeds.split(",")]
    tasks = [(m, s, args.cycles, args.budget) for m in methods for s in seeds]

    start = time.perf_counter()
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(run_one, tasks))
    else:
        results = [run_one(t) for t in tasks]
    elapsed = time.perf_counter() - start

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = [row for r in results for row in r.curve]
    with open(out / "curve.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)

    final = {(r.method, r.seed): float(r.curve[-1]["mAP"]) for r in results}
    print(f"{'method':<12}" + "".join(f"{'seed ' + str(s):>9}" for s in seeds) + f"{'mean':>9}")
    for m in methods:
        vals = [final[m, s] for s in seeds]
        print(f"{m:<12}" + "".join(f"{v:9.3f}" for v in vals) + f"{np.mean(vals):9.3f}")
    for a, b in zip(methods, methods[1:]):
        wins = sum(final[b, s] >= final[a, s] for s in seeds)
        print(f"{b} >= {a}: {wins}/{len(seeds)} seeds")
    print(f"{len(tasks)} runs in {elapsed:.0f}s; curves in {out / 'curve.csv'}")


if __name__ == "__main__":
    main()
