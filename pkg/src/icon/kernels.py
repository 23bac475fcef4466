"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The pairwise scans used by the manifold checks are O(n^2) in the cloud
sizes, which makes them the only loops in the package worth JIT-compiling.
Backend selection: set ICON_BACKEND=numpy to force the fallback, or
ICON_BACKEND=numba to require the JIT path (raises if numba is missing).
Unset, numba is used when importable. Both paths return identical values;
``benchmarks/bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_VAR = "ICON_BACKEND"


def _resolve_backend() -> str:
    choice = os.environ.get(_ENV_VAR, "auto").strip().lower()
    if choice in ("", "auto"):
        try:
            import numba  # noqa: F401
            return "numba"
        except ImportError:
            return "numpy"
    if choice == "numpy":
        return "numpy"
    if choice == "numba":
        import numba  # noqa: F401
        return "numba"
    raise ValueError(f"unknown {_ENV_VAR}={choice!r}, expected 'numba' or 'numpy'")


BACKEND = _resolve_backend()


# ---------------------------------------------------------------------------
# pure-numpy implementations (chunked to bound memory at n ~ 1e4)

_CHUNK = 512


def _np_min_pair_distance(a: np.ndarray, b: np.ndarray) -> float:
    best = np.inf
    for i in range(0, a.shape[0], _CHUNK):
        blk = a[i:i + _CHUNK]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        m = d2.min()
        if m < best:
            best = m
    return float(np.sqrt(best))


def _np_nearest_index(q: np.ndarray, c: np.ndarray) -> tuple[int, float]:
    d2 = ((c - q[None, :]) ** 2).sum(axis=1)
    idx = int(np.argmin(d2))  # argmin takes the lowest index on ties
    return idx, float(np.sqrt(d2[idx]))


def _np_pairs_within_eps(a: np.ndarray, b: np.ndarray, eps: float):
    eps2 = eps * eps
    ia, ib = [], []
    for i in range(0, a.shape[0], _CHUNK):
        blk = a[i:i + _CHUNK]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        rows, cols = np.nonzero(d2 <= eps2)
        ia.append(rows + i)
        ib.append(cols)
    return (np.concatenate(ia).astype(np.int64),
            np.concatenate(ib).astype(np.int64))


def _np_eps_graph_connected(c: np.ndarray, eps: float) -> bool:
    n = c.shape[0]
    if n <= 1:
        return True
    eps2 = eps * eps
    parent = np.arange(n)

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(0, n, _CHUNK):
        blk = c[i:i + _CHUNK]
        d2 = ((blk[:, None, :] - c[None, :, :]) ** 2).sum(axis=2)
        rows, cols = np.nonzero(d2 <= eps2)
        for r, s in zip(rows + i, cols):
            ra, rb = find(r), find(s)
            if ra != rb:
                parent[rb] = ra
    root = find(0)
    return all(find(i) == root for i in range(n))


# ---------------------------------------------------------------------------
# numba implementations

if BACKEND == "numba":
    from numba import njit

    @njit(cache=True)
    def _nb_min_pair_distance(a, b):
        best = np.inf
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                d2 = 0.0
                for k in range(a.shape[1]):
                    diff = a[i, k] - b[j, k]
                    d2 += diff * diff
                if d2 < best:
                    best = d2
        return np.sqrt(best)

    @njit(cache=True)
    def _nb_nearest_index(q, c):
        best = np.inf
        idx = 0
        for j in range(c.shape[0]):
            d2 = 0.0
            for k in range(c.shape[1]):
                diff = c[j, k] - q[k]
                d2 += diff * diff
            if d2 < best:  # strict: earlier index wins ties
                best = d2
                idx = j
        return idx, np.sqrt(best)

    @njit(cache=True)
    def _nb_pairs_within_eps(a, b, eps):
        eps2 = eps * eps
        count = 0
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                d2 = 0.0
                for k in range(a.shape[1]):
                    diff = a[i, k] - b[j, k]
                    d2 += diff * diff
                if d2 <= eps2:
                    count += 1
        ia = np.empty(count, dtype=np.int64)
        ib = np.empty(count, dtype=np.int64)
        pos = 0
        for i in range(a.shape[0]):
            for j in range(b.shape[0]):
                d2 = 0.0
                for k in range(a.shape[1]):
                    diff = a[i, k] - b[j, k]
                    d2 += diff * diff
                if d2 <= eps2:
                    ia[pos] = i
                    ib[pos] = j
                    pos += 1
        return ia, ib

    @njit(cache=True)
    def _nb_eps_graph_connected(c, eps):
        n = c.shape[0]
        if n <= 1:
            return True
        eps2 = eps * eps
        parent = np.arange(n)
        for i in range(n):
            for j in range(i + 1, n):
                d2 = 0.0
                for k in range(c.shape[1]):
                    diff = c[i, k] - c[j, k]
                    d2 += diff * diff
                if d2 <= eps2:
                    ra = i
                    while parent[ra] != ra:
                        parent[ra] = parent[parent[ra]]
                        ra = parent[ra]
                    rb = j
                    while parent[rb] != rb:
                        parent[rb] = parent[parent[rb]]
                        rb = parent[rb]
                    if ra != rb:
                        parent[rb] = ra
        root = 0
        while parent[root] != root:
            root = parent[root]
        for i in range(n):
            r = i
            while parent[r] != r:
                r = parent[r]
            if r != root:
                return False
        return True


def _as2d(x) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64))


def min_pair_distance(a, b) -> float:
    """Smallest Euclidean distance between any row of ``a`` and any row of ``b``."""
    a, b = _as2d(a), _as2d(b)
    if BACKEND == "numba":
        return float(_nb_min_pair_distance(a, b))
    return _np_min_pair_distance(a, b)


def nearest_index(q, c) -> tuple[int, float]:
    """Index and distance of the row of ``c`` closest to ``q``; ties take the lowest index."""
    q = np.ascontiguousarray(np.asarray(q, dtype=np.float64))
    c = _as2d(c)
    if BACKEND == "numba":
        idx, d = _nb_nearest_index(q, c)
        return int(idx), float(d)
    return _np_nearest_index(q, c)


def pairs_within_eps(a, b, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Row-index pairs (i, j) with ``||a[i] - b[j]|| <= eps``, in row-major order."""
    a, b = _as2d(a), _as2d(b)
    if BACKEND == "numba":
        return _nb_pairs_within_eps(a, b, float(eps))
    return _np_pairs_within_eps(a, b, float(eps))


def eps_graph_connected(c, eps: float) -> bool:
    """True iff the eps-neighborhood graph over the rows of ``c`` has one component."""
    c = _as2d(c)
    if BACKEND == "numba":
        return bool(_nb_eps_graph_connected(c, float(eps)))
    return _np_eps_graph_connected(c, float(eps))
