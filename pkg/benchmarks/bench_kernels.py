"""Compare the compiled and numpy kernels on desk-scale workloads.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""
import argparse
import time

import numpy as np

from overlasso import kernels
from overlasso.model import generate_instance, make_contiguous_groups, random_group_collection
from overlasso.norm import overlap_norm
from overlasso.solver import SolverConfig, duplicate_design, fit, lambda_grid, lambda_max


def bench_path(backend, overlap):
    G = make_contiguous_groups(128, 8, overlap)
    inst = generate_instance(128, 48, G, 2, 0.01, seed=0)
    design = duplicate_design(inst, G)
    lams = lambda_grid(lambda_max(inst, G), 20, 1e-3)
    warm = None
    t = time.perf_counter()
    for lam in lams:
        r = fit(inst, G, SolverConfig(lam=lam, tolerance=1e-9, warm_start=warm),
                design=design, backend=backend)
        warm = r.decomposition.latent
    return time.perf_counter() - t


def bench_norm(backend):
    rng = np.random.default_rng(0)
    cases = [(rng.standard_normal(64), make_contiguous_groups(64, 8, 5)) for _ in range(10)]
    cases += [(rng.standard_normal(10), random_group_collection(10, 8, rng)) for _ in range(10)]
    t = time.perf_counter()
    for beta, G in cases:
        overlap_norm(beta, G, backend=backend)
    return time.perf_counter() - t


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    if not kernels.compiled_available():
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation`")
    rows = [("path overlap=1", lambda b: bench_path(b, 1)),
            ("path overlap=4", lambda b: bench_path(b, 4)),
            ("path overlap=7", lambda b: bench_path(b, 7)),
            ("norm x20", bench_norm)]
    print(f"{'workload':<18}{'cython s':>10}{'python s':>10}{'speedup':>9}")
    for name, fn in rows:
        tc = min(fn("cython") for _ in range(args.repeat))
        tp = min(fn("python") for _ in range(args.repeat))
        print(f"{name:<18}{tc:>10.4f}{tp:>10.4f}{tp / tc:>8.1f}x")


if __name__ == "__main__":
    main()
