"""Exact dynamic time warping with the symmetric step set {(1,0), (0,1), (1,1)}.

No band or window constraint is applied. Warping paths are returned as
0-based ``(i, j)`` index pairs.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .errors import PedflowError

COSTS = ("abs", "squared")


@njit(cache=True)
def _local(a, b, squared):
    d = a - b
    return d * d if squared else abs(d)


@njit(cache=True)
def _accumulate(x, y, squared):
    n, m = x.shape[0], y.shape[0]
    acc = np.full((n + 1, m + 1), np.inf)
    acc[0, 0] = 0.0
    for i in range(1, n + 1):
        xi = x[i - 1]
        for j in range(1, m + 1):
            best = acc[i - 1, j - 1]
            if acc[i - 1, j] < best:
                best = acc[i - 1, j]
            if acc[i, j - 1] < best:
                best = acc[i, j - 1]
            acc[i, j] = best + _local(xi, y[j - 1], squared)
    return acc


@njit(cache=True)
def _distance(x, y, squared):
    # two-row version of _accumulate
    m = y.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(x.shape[0]):
        cur[0] = np.inf
        xi = x[i]
        for j in range(1, m + 1):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + _local(xi, y[j - 1], squared)
        prev, cur = cur, prev
    return prev[m]


@njit(cache=True)
def _pairwise_columns(a, b, squared, symmetric):
    na, nb = a.shape[1], b.shape[1]
    out = np.zeros((na, nb))
    for i in range(na):
        start = i + 1 if symmetric else 0
        for j in range(start, nb):
            d = _distance(np.ascontiguousarray(a[:, i]), np.ascontiguousarray(b[:, j]), squared)
            out[i, j] = d
            if symmetric:
                out[j, i] = d
    return out


def _as_series(x, label="series"):
    arr = np.asarray(x, dtype=float).ravel()
    if arr.size == 0:
        raise PedflowError(f"{label} is empty")
    if not np.all(np.isfinite(arr)):
        raise PedflowError(f"{label} contains non-finite points")
    return np.ascontiguousarray(arr)


def _squared(cost):
    if cost not in COSTS:
        raise PedflowError(f"unknown local cost {cost!r}; expected one of {COSTS}")
    return cost == "squared"


def dtw_distance(x, y, cost="abs") -> float:
    """DTW distance between two univariate series."""
    return float(_distance(_as_series(x, "x"), _as_series(y, "y"), _squared(cost)))


def dtw_path(x, y, cost="abs"):
    """Return ``(distance, path)`` with the optimal warping path.

    Backtracking prefers the diagonal move on ties, then (i-1, j), then (i, j-1).
    """
    x = _as_series(x, "x")
    y = _as_series(y, "y")
    acc = _accumulate(x, y, _squared(cost))
    i, j = x.size, y.size
    path = [(i - 1, j - 1)]
    while (i, j) != (1, 1):
        moves = ((i - 1, j - 1), (i - 1, j), (i, j - 1))
        i, j = min(moves, key=lambda ij: acc[ij])
        path.append((i - 1, j - 1))
    path.reverse()
    return float(acc[-1, -1]), path


def path_cost(x, y, path, cost="abs"):
    squared = _squared(cost)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    return float(sum((x[i] - y[j]) ** 2 if squared else abs(x[i] - y[j]) for i, j in path))


def pairwise_dtw(columns, cost="abs") -> np.ndarray:
    """Symmetric N x N matrix of DTW distances between the columns of a (T, N) array.

    A list of 1-D series of differing lengths is also accepted.
    """
    squared = _squared(cost)
    if isinstance(columns, np.ndarray) and columns.ndim == 2:
        data = np.ascontiguousarray(columns, dtype=float)
        for k in range(data.shape[1]):
            _as_series(data[:, k], f"series {k}")
        return _pairwise_columns(data, data, squared, True)
    series = [_as_series(c, f"series {k}") for k, c in enumerate(columns)]
    n = len(series)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = _distance(series[i], series[j], squared)
    return out


def columnwise_dtw(a, b, cost="abs") -> np.ndarray:
    """DTW between matching columns of two (T, N) arrays; returns length-N vector."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise PedflowError(f"column count mismatch: {a.shape} vs {b.shape}")
    squared = _squared(cost)
    return np.array([
        _distance(np.ascontiguousarray(a[:, k]), np.ascontiguousarray(b[:, k]), squared)
        for k in range(a.shape[1])
    ])
