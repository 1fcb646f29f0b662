"""Compare the compiled graph kernels against the numpy fallback.

Runs a Vamana build pass and a batch of beam searches with both backends on
the same random corpus, checks that they agree, and prints timings as TSV.

Usage::

    python3 benchmarks/bench_kernels.py [--n 2000] [--d 32] [--queries 200]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from uniretriever import _kernels_py
from uniretriever.core import Rng

try:
    from uniretriever import _kernels as _kernels_cy
except ImportError:  # extension not built
    _kernels_cy = None


def _random_graph(n: int, R: int, rng: Rng):
    adj = np.full((n, R), -1, dtype=np.int64)
    deg = np.zeros(n, dtype=np.int64)
    for i in range(n):
        nb = rng.choice(np.delete(np.arange(n), i), R // 2, replace=False)
        adj[i, : len(nb)] = nb
        deg[i] = len(nb)
    return adj, deg


def run(impl, vectors, queries, adj0, deg0, order, L, alpha, R):
    adj, deg = adj0.copy(), deg0.copy()
    t0 = time.perf_counter()
    impl.build_pass(adj, deg, vectors, order, 0, L, alpha, R)
    t_build = time.perf_counter() - t0
    t0 = time.perf_counter()
    results = [impl.greedy_search_ip(adj, deg, vectors, q, 0, L)[0] for q in queries]
    t_search = time.perf_counter() - t0
    return adj, deg, results, t_build, t_search


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--R", type=int, default=32)
    ap.add_argument("--L", type=int, default=64)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = Rng(args.seed)
    # integer-valued vectors keep the arithmetic exact so both backends build the same graph
    vectors = rng.integers(-8, 9, (args.n, args.d)).astype(np.float32)
    queries = rng.integers(-8, 9, (args.queries, args.d)).astype(np.float64)
    adj0, deg0 = _random_graph(args.n, args.R, rng)
    order = rng.permutation(args.n)

    backends = [("python", _kernels_py)]
    if _kernels_cy is not None:
        backends.append(("cython", _kernels_cy))
    rows = {}
    print("backend\tbuild_pass_s\tsearch_ms_per_query\tspeedup_build\tspeedup_search")
    for name, impl in backends:
        rows[name] = run(impl, vectors, queries, adj0, deg0, order, args.L, 1.2, args.R)
    base = rows["python"]
    for name, (_, _, _, tb, ts) in rows.items():
        print(f"{name}\t{tb:.3f}\t{1000 * ts / args.queries:.3f}\t{base[3] / tb:.1f}\t{base[4] / ts:.1f}")
    if "cython" in rows:
        a, b = rows["python"], rows["cython"]
        same = np.array_equal(a[0], b[0]) and all(np.array_equal(x, y) for x, y in zip(a[2], b[2]))
        print(f"# graphs and search results identical: {same}")
    else:
        print("# compiled extension not available; only the fallback was timed")


if __name__ == "__main__":
    main()
