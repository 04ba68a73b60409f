#!/usr/bin/env python3
"""Time graph construction and min-cut labeling on a large synthetic input.

The default input holds about 100k detections in 500 (video, class)
components. Reports single-process time and the speedup for each worker
count given; the speedup is bounded by the number of available cores.

    python scripts/graph_benchmark.py --jobs 1 2 4 8
"""
import argparse
import os
import time

from tcal.energy import solve_graphs
from tcal.simulator import benchmark_dataset
from tcal.tcgraph import build_graph


def timed(ds, jobs):
    start = time.perf_counter()
    graphs = build_graph(ds, jobs=jobs)
    t_build = time.perf_counter() - start
    sols = solve_graphs(graphs, jobs=jobs)
    return t_build, time.perf_counter() - start - t_build, graphs, sols


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0],
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--videos", type=int, default=125)
    p.add_argument("--frames", type=int, default=200)
    p.add_argument("--jobs", type=int, nargs="+", default=[1, 8])
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    ds = benchmark_dataset(num_videos=args.videos, num_frames=args.frames, seed=args.seed)
    n_dets = sum(len(f) for frames in ds.detections.values() for f in frames)
    print(f"{n_dets} detections, {os.cpu_count()} CPU(s)")
    base = None
    for jobs in args.jobs:
        t_build, t_solve, graphs, sols = timed(ds, jobs)
        total = t_build + t_solve
        base = base or total
        n_fp = sum(sum(s.fp_count.values()) for s in sols)
        n_fn = sum(sum(s.fn_count.values()) for s in sols)
        print(f"jobs={jobs}: {len(graphs)} graphs, {sum(g.num_nodes for g in graphs)} nodes, "
              f"build {t_build:.2f}s, solve {t_solve:.2f}s, total {total:.2f}s, "
              f"speedup {base / total:.2f}x, FP {n_fp}, FN {n_fn}")


if __name__ == "__main__":
    main()
