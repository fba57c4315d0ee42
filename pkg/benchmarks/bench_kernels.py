"""Compare the compiled and pure-numpy scan kernels on one workload.

Generates a planted-signal dataset, builds the pooled-slope feature graph,
then times the full permutation sweep (observed labeling + permutations,
every region) through each backend. The compiled backend is warmed up once
so JIT compilation is not billed to the measurement.

Usage: python benchmarks/bench_kernels.py [--p 50] [--n 20] [--perms 19]

Defaults finish in a few minutes on one core; raise --n/--perms to stress it.
"""

import argparse
import os
import sys
import time

import numpy as np

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from covscan.backend import backend_name
from covscan.scan import compute_scan_statistics, enumerate_balls, permutation_labels
from covscan.simulate import SimConfig, gen_group_data, oracle_graph_from_data


def build_workload(p, n, perms, seed, mode):
    cfg = SimConfig(p=p, p_t=5, n=n, runs=1, seed=seed, signal_scale=2.5)
    run = gen_group_data(cfg, 0)
    graph, lam = oracle_graph_from_data(run.data)
    regions = [r for r in enumerate_balls(graph, max_radius=1) if r.edge_count >= 1]
    labels = permutation_labels(run.data, n_perm=perms, seed=seed)
    return run.data, regions, labels, graph, lam


def time_backend(name, data, regions, labels, mode, repeat):
    os.environ["COVSCAN_BACKEND"] = name
    # first call may compile; keep it out of the measurement
    out = compute_scan_statistics(data, regions, labels, mode=mode)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = compute_scan_statistics(data, regions, labels, mode=mode)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--p", type=int, default=50, help="features (default 50)")
    ap.add_argument("--n", type=int, default=20, help="subjects per group (default 20)")
    ap.add_argument("--perms", type=int, default=19, help="permutations (default 19)")
    ap.add_argument("--mode", default="trajectory",
                    choices=("trajectory", "product", "glm_slope"))
    ap.add_argument("--repeat", type=int, default=1,
                    help="timed repetitions, best is reported (default 1)")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    prior = os.environ.get("COVSCAN_BACKEND")
    data, regions, labels, graph, lam = build_workload(
        args.p, args.n, args.perms, args.seed, args.mode
    )
    work_items = labels.shape[0] * len(regions)
    print(
        f"workload: p={args.p} n={args.n}/group mode={args.mode} "
        f"graph edges={graph.edge_count} regions={len(regions)} "
        f"labelings={labels.shape[0]} ({work_items} work items)"
    )

    try:
        t_np, out_np = time_backend("numpy", data, regions, labels, args.mode, args.repeat)
        print(f"numpy : {t_np:8.3f} s  ({work_items / t_np:8.0f} items/s)")
        try:
            t_nb, out_nb = time_backend(
                "numba", data, regions, labels, args.mode, args.repeat
            )
        except ImportError:
            print("numba : not installed, skipped")
            return 0
        print(
            f"numba : {t_nb:8.3f} s  ({work_items / t_nb:8.0f} items/s)"
            f"  speedup x{t_np / t_nb:.1f}"
        )
        gap = float(np.nanmax(np.abs(out_np - out_nb)))
        print(f"max |numpy - numba| over all statistics: {gap:.3e}")
    finally:
        if prior is None:
            os.environ.pop("COVSCAN_BACKEND", None)
        else:
            os.environ["COVSCAN_BACKEND"] = prior
    return 0


if __name__ == "__main__":
    sys.exit(main())
