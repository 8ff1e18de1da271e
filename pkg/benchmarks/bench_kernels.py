"""Time the numpy fallback against the compiled kernels.

    python3 benchmarks/bench_kernels.py [--n 2000] [--d 64] [--k 8] [--repeat 5]
"""
import argparse
import timeit

import numpy as np

from posegnn import kernels
from posegnn.graph import knn_graph


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=64)
    ap.add_argument("--k", type=int, default=8)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    x = rng.standard_normal((args.n, args.d))
    g = knn_graph(x, args.k)
    names = ["python"]
    try:
        kernels.get_backend("cython")
        names.append("cython")
    except ImportError:
        print("compiled kernels unavailable; timing the fallback only")

    cases = {
        "knn_query": lambda b: b.knn_query(x, x, args.k, True),
        "normalized_aggregate": lambda b: b.normalized_aggregate(g.indptr, g.indices, x),
        "neighbor_sum": lambda b: b.neighbor_sum(g.indptr, g.indices, x),
    }
    print(f"n={args.n} d={args.d} k={args.k} (best of {args.repeat}, ms)")
    print(f"{'kernel':<22}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) == 2 else ""))
    for label, fn in cases.items():
        results, times = [], []
        for name in names:
            backend = kernels.get_backend(name)
            results.append(fn(backend))
            times.append(min(timeit.repeat(lambda: fn(backend), number=1, repeat=args.repeat)) * 1e3)
        if len(results) == 2 and not np.array_equal(results[0], results[1]):
            raise SystemExit(f"{label}: backends disagree")
        line = f"{label:<22}" + "".join(f"{t:>12.2f}" for t in times)
        if len(times) == 2:
            line += f"{times[0] / times[1]:>11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
