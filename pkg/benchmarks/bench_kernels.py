"""Time the numba kernels against their pure-numpy fallbacks.

Run:  python3 benchmarks/bench_kernels.py [--repeats N]

The same dispatch decision can be forced at import time for the whole package
with MOELAB_DISABLE_NUMBA=1; this script always times both paths directly.
"""

import argparse
import time

import numpy as np

from moelab import _kernels as K


def timeit(fn, *args, repeats=5):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def random_selection(rng, layers, tokens, e, k):
    sel = np.empty((layers, tokens, k), dtype=np.int64)
    for l in range(layers):
        for t in range(tokens):
            sel[l, t] = rng.choice(e, size=k, replace=False)
    return sel


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    if not K.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")

    rng = np.random.default_rng(0)

    n, d, m = 4096, 128, 262144
    idx = rng.integers(0, n, size=m).astype(np.int64)
    rows = rng.normal(size=(m, d))

    r, e, k = 200_000, 8, 2
    sidx = rng.integers(0, e, size=(r, k)).astype(np.int64)
    svals = rng.normal(size=(r, k))

    pr = rng.integers(0, n, size=m).astype(np.int64)
    pc = rng.integers(0, d, size=m).astype(np.int64)
    pv = rng.normal(size=m)

    sel = random_selection(rng, 4, 20_000, 8, 2)
    w = np.ascontiguousarray(rng.normal(size=(r, e)))

    cases = [
        ("index_add_rows", K.index_add_rows_np, K.index_add_rows_nb,
         lambda: (np.zeros((n, d)), idx, rows)),
        ("scatter_add_lastdim", K.scatter_add_lastdim_np, K.scatter_add_lastdim_nb,
         lambda: (np.zeros((r, e)), sidx, svals)),
        ("scatter_add_pairs", K.scatter_add_pairs_np, K.scatter_add_pairs_nb,
         lambda: (np.zeros((n, d)), pr, pc, pv)),
        ("transition_count", K.transition_count_np, K.transition_count_nb,
         lambda: (sel, 8)),
        ("swap_in_counts", K.swap_in_counts_np, K.swap_in_counts_nb,
         lambda: (sel, 8)),
        ("usage_counts", K.usage_counts_np, K.usage_counts_nb,
         lambda: (sel, 8)),
        ("topk_lastdim", K.topk_lastdim_np, K.topk_lastdim_nb,
         lambda: (w, k)),
    ]

    print(f"{'kernel':<22}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for name, np_fn, nb_fn, make_args in cases:
        nb_fn(*make_args())  # compile outside the timed region
        t_np = timeit(np_fn, *make_args(), repeats=args.repeats)
        t_nb = timeit(nb_fn, *make_args(), repeats=args.repeats)
        print(f"{name:<22}{t_np * 1e3:>10.2f}ms{t_nb * 1e3:>10.2f}ms{t_np / t_nb:>9.1f}x")


if __name__ == "__main__":
    main()
