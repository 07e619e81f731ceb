"""Edit-distance kernels.

The compiled path uses numba; setting ``ZSSLU_DISABLE_NUMBA=1`` (or a
missing numba install) selects the vectorized numpy path instead. Both paths
are exercised by the test suite and compared in ``benchmarks/bench_kernels.py``.
"""

from __future__ import annotations

import os
from typing import Hashable, Sequence

import numpy as np

NUMBA_DISABLED = os.environ.get("ZSSLU_DISABLE_NUMBA", "").lower() in ("1", "true", "yes")

try:  # pragma: no cover - import guard
    if NUMBA_DISABLED:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False


def levenshtein_numpy(a: np.ndarray, b: np.ndarray) -> int:
    """Row-by-row DP; the insertion chain is resolved with a running minimum."""
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return n + m
    cols = np.arange(m + 1)
    prev = cols.copy()
    for i in range(1, n + 1):
        cost = (b != a[i - 1]).astype(np.int64)
        t = np.empty(m + 1, dtype=np.int64)
        t[0] = i
        t[1:] = np.minimum(prev[1:] + 1, prev[:-1] + cost)
        prev = cols + np.minimum.accumulate(t - cols)
    return int(prev[m])


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def levenshtein_numba(a, b):  # pragma: no cover - compiled
        n, m = a.shape[0], b.shape[0]
        if n == 0 or m == 0:
            return n + m
        prev = np.arange(m + 1)
        cur = np.empty(m + 1, dtype=np.int64)
        for i in range(1, n + 1):
            cur[0] = i
            ai = a[i - 1]
            for j in range(1, m + 1):
                best = prev[j - 1] + (0 if b[j - 1] == ai else 1)
                if prev[j] + 1 < best:
                    best = prev[j] + 1
                if cur[j - 1] + 1 < best:
                    best = cur[j - 1] + 1
                cur[j] = best
            prev, cur = cur, prev
        return prev[m]

else:
    levenshtein_numba = None


def _encode_pair(a: Sequence[Hashable], b: Sequence[Hashable]) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(a, str) and isinstance(b, str):
        return (np.frombuffer(a.encode("utf-32-le"), dtype=np.uint32).astype(np.int64),
                np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32).astype(np.int64))
    codes: dict = {}
    ea = np.array([codes.setdefault(x, len(codes)) for x in a], dtype=np.int64)
    eb = np.array([codes.setdefault(x, len(codes)) for x in b], dtype=np.int64)
    return ea, eb


def edit_distance(a: Sequence[Hashable], b: Sequence[Hashable], backend: str | None = None) -> int:
    """Levenshtein distance between two token (or character) sequences."""
    ea, eb = _encode_pair(a, b)
    if backend is None:
        backend = "numba" if HAVE_NUMBA else "numpy"
    if backend == "numba":
        if not HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is unavailable or disabled")
        return int(levenshtein_numba(ea, eb))
    if backend == "numpy":
        return levenshtein_numpy(ea, eb)
    raise ValueError(f"unknown backend {backend!r}")
