#!/usr/bin/env python3
"""Measure how well temporal-coherence labels recover injected detector errors.

Generates a world with exact motion, runs a surrogate detector whose errors
are all single-frame flickers, estimates FP/FN from the graph labels and
reports precision and recall against the injected errors. Sweeping the
flicker probability shows how estimation degrades once errors persist over
several frames.

    python scripts/estimation_quality.py --rho 1.0 0.7 0.3 0.0
"""
import argparse
import time

from tcal.simulator import (DetectorConfig, StratumConfig, SurrogateDetector, WorldConfig, detect,
                            estimation_quality, generate_world)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--videos", type=int, default=30)
    p.add_argument("--rho", type=float, nargs="+", default=[1.0],
                   help="probability that an error lasts a single frame")
    p.add_argument("--miss", type=float, default=0.08, help="per-object miss rate")
    p.add_argument("--fp", type=float, default=0.05, help="per-object and background FP rate")
    args = p.parse_args()

    spawn = {"pedestrian": 0.3, "cyclist": 0.2, "car": 0.35, "wheelchair": 0.1}
    world = generate_world(WorldConfig(seed=args.seed, strata=(StratumConfig("default", args.videos, spawn),),
                                       frames_min=250, frames_max=300))
    print(f"{'rho':>5} {'inj FP':>7} {'FP prec':>8} {'FP rec':>7} {'misses':>7} {'FN rec':>7} {'time':>6}")
    for rho in args.rho:
        start = time.perf_counter()
        cfg = DetectorConfig(rho=rho, p_miss_max=args.miss, p_miss_min=args.miss, fp_rate_max=args.fp,
                             fp_rate_min=args.fp, bg_fp_max=args.fp, bg_fp_min=args.fp,
                             jitter_max=1.0, jitter_min=1.0)
        dets, tags = detect(world, SurrogateDetector.uniform(cfg, world, 1.0), seed=args.seed, with_tags=True)
        q = estimation_quality(world, dets, tags)
        print(f"{rho:5.2f} {q.injected_fp:7d} {q.fp_precision:8.3f} {q.fp_recall:7.3f} "
              f"{q.injected_miss:7d} {q.fn_recall:7.3f} {time.perf_counter() - start:5.1f}s")


if __name__ == "__main__":
    main()
