import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedflow.dtw import columnwise_dtw, dtw_distance, dtw_path, pairwise_dtw, path_cost
from pedflow.errors import PedflowError

from conftest import brute_dtw

series = st.lists(st.integers(0, 9), min_size=1, max_size=6)


def check_path(path, n, m):
    assert path[0] == (0, 0) and path[-1] == (n - 1, m - 1)
    for (i0, j0), (i1, j1) in zip(path, path[1:]):
        assert (i1 - i0, j1 - j0) in {(1, 0), (0, 1), (1, 1)}


def test_examples():
    assert dtw_distance([1, 2, 3], [1, 2, 3]) == 0
    assert dtw_distance([1, 2, 3], [1, 2, 2, 3]) == 0
    assert dtw_distance([0], [1, 2, 3]) == 6
    assert dtw_distance([2.0], [5.0]) == 3.0
    assert dtw_distance([0], [1, 2, 3], cost="squared") == 14


def test_path_examples():
    d, path = dtw_path([4, 5, 6, 7], [4, 5, 6, 7])
    assert d == 0 and path == [(i, i) for i in range(4)]
    d, path = dtw_path([0], [1, 2])
    assert d == 3 and path == [(0, 0), (0, 1)]


def test_empty_or_nonfinite():
    with pytest.raises(PedflowError):
        dtw_distance([], [1.0])
    with pytest.raises(PedflowError):
        dtw_distance([np.nan], [1.0])


@settings(max_examples=200, deadline=None)
@given(series, series)
def test_matches_brute_force(x, y):
    d = dtw_distance(x, y)
    assert d == brute_dtw(x, y)
    assert d == dtw_distance(y, x)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=5),
       st.lists(st.integers(0, 9), min_size=1, max_size=5))
def test_path_is_optimal(x, y):
    d, path = dtw_path(x, y)
    check_path(path, len(x), len(y))
    assert path_cost(x, y, path) == d == brute_dtw(x, y)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=1, max_size=12))
def test_self_distance_zero(x):
    assert dtw_distance(x, x) == 0


def test_squared_cost_brute_force(rng):
    for _ in range(50):
        x = rng.integers(0, 9, rng.integers(1, 6)).astype(float)
        y = rng.integers(0, 9, rng.integers(1, 6)).astype(float)
        assert dtw_distance(x, y, "squared") == brute_dtw(x, y, lambda a, b: (a - b) ** 2)


def test_pairwise(rng):
    same = np.tile(rng.normal(size=(20, 1)), (1, 3))
    np.testing.assert_array_equal(pairwise_dtw(same), np.zeros((3, 3)))
    cols = rng.normal(size=(15, 4))
    d = pairwise_dtw(cols)
    expected = np.array([[dtw_distance(cols[:, i], cols[:, j]) for j in range(4)]
                         for i in range(4)])
    np.testing.assert_array_equal(d, expected)
    assert np.all(np.diag(d) == 0) and np.array_equal(d, d.T)
    # list of unequal-length series
    seqs = [rng.normal(size=n) for n in (3, 7, 5)]
    d = pairwise_dtw(seqs)
    assert d[0, 1] == dtw_distance(seqs[0], seqs[1])


def test_columnwise(rng):
    a, b = rng.normal(size=(10, 3)), rng.normal(size=(8, 3))
    expected = [dtw_distance(a[:, i], b[:, i]) for i in range(3)]
    np.testing.assert_array_equal(columnwise_dtw(a, b), expected)
