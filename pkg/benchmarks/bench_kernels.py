"""Throughput comparison of the numba kernels against the pure-numpy fallback.

Run directly: python benchmarks/bench_kernels.py [n_points]
The numbers cover the pairwise scans behind the manifold checks, which are
the only O(n^2) loops in the package.
"""

import sys
import time

import numpy as np

from icon import kernels


def _time(fn, *args, repeat=3):
    best = float("inf")
    result = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        result = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, result


def main() -> None:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
    dim = 16
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n, dim))
    b = rng.standard_normal((n, dim)) + 0.5
    cloud = rng.standard_normal((n // 2, dim))

    cases = [
        ("min_pair_distance", kernels._np_min_pair_distance, a, b),
        ("pairs_within_eps", lambda x, y: kernels._np_pairs_within_eps(x, y, 0.8), a, b),
        ("eps_graph_connected", lambda c: kernels._np_eps_graph_connected(c, 2.0), cloud),
    ]
    if kernels.BACKEND != "numba":
        print("numba backend unavailable (ICON_BACKEND=numpy?); showing numpy only")
    print(f"n = {n}, dim = {dim}, backend = {kernels.BACKEND}")
    print(f"{'kernel':<22} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for name, np_fn, *args in cases:
        t_np, r_np = _time(np_fn, *args)
        if kernels.BACKEND == "numba":
            nb_fn = {
                "min_pair_distance": lambda x, y: kernels._nb_min_pair_distance(x, y),
                "pairs_within_eps": lambda x, y: kernels._nb_pairs_within_eps(x, y, 0.8),
                "eps_graph_connected": lambda c: kernels._nb_eps_graph_connected(c, 2.0),
            }[name]
            nb_fn(*[np.ascontiguousarray(x) for x in args])  # warm the JIT
            t_nb, r_nb = _time(nb_fn, *[np.ascontiguousarray(x) for x in args])
            if name == "min_pair_distance":
                assert abs(float(r_np) - float(r_nb)) < 1e-12
            print(f"{name:<22} {t_np*1e3:>8.1f}ms {t_nb*1e3:>8.1f}ms {t_np/t_nb:>8.1f}x")
        else:
            print(f"{name:<22} {t_np*1e3:>8.1f}ms {'-':>10} {'-':>9}")


if __name__ == "__main__":
    main()
