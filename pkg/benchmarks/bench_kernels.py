"""Compare the compiled and pure-Python kernel backends on identical inputs.

    python benchmarks/bench_kernels.py [--n 2000] [--dim 64] [--queries 200]

Both backends receive the same vectors and level draws; the script checks that
they build the same graph and return the same neighbours before timing anything.
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from vpg.ann import draw_levels
from vpg.kernels import backends


def timed(fn, *args, repeat: int = 1):
    best, out = float("inf"), None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--queries", type=int, default=200)
    ap.add_argument("--M", type=int, default=16)
    ap.add_argument("--ef-construction", type=int, default=200)
    ap.add_argument("--ef-search", type=int, default=128)
    ap.add_argument("--k", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    data = rng.standard_normal((args.n, args.dim)).astype(np.float32)
    data /= np.linalg.norm(data, axis=1, keepdims=True)
    queries = rng.standard_normal((args.queries, args.dim)).astype(np.float32)
    codes = rng.integers(0, 2**63, size=(100_000, 1), dtype=np.int64).astype(np.uint64)
    levels = draw_levels(args.n, args.M, 100)

    found = backends()
    results, graphs = {}, {}
    for name, mod in found.items():
        build_s, graph = timed(mod.hnsw_build, data, levels, args.M, args.ef_construction)
        links, counts, entry, max_level = graph
        search_s, (ids, _) = timed(mod.hnsw_search, data, links, counts, entry, max_level, queries, args.k, args.ef_search, repeat=3)
        ham_s, _ = timed(mod.hamming_many, codes[0], codes, repeat=3)
        graphs[name] = (links, counts, ids)
        results[name] = {
            "build_s": round(build_s, 4),
            "search_qps": round(args.queries / search_s, 1),
            "hamming_100k_ms": round(ham_s * 1000, 3),
        }

    if len(graphs) == 2:
        (l1, c1, i1), (l2, c2, i2) = graphs.values()
        same = np.array_equal(c1, c2) and np.array_equal(l1, l2) and np.array_equal(i1, i2)
        results["identical_graph_and_results"] = bool(same)
        py, cy = results["python"], results["cython"]
        results["speedup"] = {
            "build": round(py["build_s"] / cy["build_s"], 1),
            "search": round(cy["search_qps"] / py["search_qps"], 1),
            "hamming": round(py["hamming_100k_ms"] / max(cy["hamming_100k_ms"], 1e-6), 1),
        }
    else:
        results["note"] = "compiled extension not importable; only the Python fallback was timed"
    print(json.dumps({"params": vars(args), **results}, indent=2))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
