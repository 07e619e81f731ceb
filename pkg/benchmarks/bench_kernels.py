"""Compare the numba and numpy edit-distance kernels.

    python3 benchmarks/bench_kernels.py [--pairs 2000] [--length 40]

Prints per-call microseconds for each backend at a few sequence lengths and
checks that both return identical distances.
"""

import argparse
import time

import numpy as np

from zsslu.kernels import HAVE_NUMBA, levenshtein_numba, levenshtein_numpy


def _pairs(rng, n, length, alphabet=8):
    out = []
    for _ in range(n):
        la, lb = rng.integers(0, length + 1, size=2)
        out.append((rng.integers(0, alphabet, la).astype(np.int64), rng.integers(0, alphabet, lb).astype(np.int64)))
    return out


def _time(fn, pairs, repeat=3):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        res = [fn(a, b) for a, b in pairs]
        best = min(best, time.perf_counter() - t0)
    return best / len(pairs) * 1e6, res


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pairs", type=int, default=2000)
    ap.add_argument("--length", type=int, nargs="+", default=[8, 40, 200])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    rng = np.random.default_rng(args.seed)
    if HAVE_NUMBA:
        levenshtein_numba(np.zeros(1, np.int64), np.zeros(1, np.int64))  # compile outside the timing
    print(f"{'max_len':>8} {'numpy_us':>10} {'numba_us':>10} {'speedup':>8} agree")
    for length in args.length:
        pairs = _pairs(rng, args.pairs, length)
        t_np, r_np = _time(levenshtein_numpy, pairs)
        if HAVE_NUMBA:
            t_nb, r_nb = _time(levenshtein_numba, pairs)
            agree = [int(x) for x in r_nb] == r_np
            print(f"{length:>8} {t_np:>10.2f} {t_nb:>10.2f} {t_np / t_nb:>8.1f} {agree}")
        else:
            print(f"{length:>8} {t_np:>10.2f} {'n/a':>10} {'n/a':>8} -")


if __name__ == "__main__":
    main()
