"""Numba and numpy kernel twins against brute-force oracles."""

import itertools

import numpy as np
import pytest

from pptts import _kernels


def brute_force_alignment(grid):
    """Exhaustive optimum over every complete monotonic alignment."""
    n, t = grid.shape
    best_score, best_assign = -np.inf, None
    for cuts in itertools.combinations(range(1, t), n - 1):
        bounds = (0,) + cuts + (t,)
        assign = np.empty(t, dtype=np.int64)
        for j in range(n):
            assign[bounds[j] : bounds[j + 1]] = j
        score = grid[assign, np.arange(t)].sum()
        if score > best_score:
            best_score, best_assign = score, assign
    return best_score, best_assign


def dp_matrix_levenshtein(a, b):
    """Classic full-matrix edit distance, kept deliberately naive."""
    la, lb = len(a), len(b)
    d = np.zeros((la + 1, lb + 1), dtype=np.int64)
    d[:, 0] = np.arange(la + 1)
    d[0, :] = np.arange(lb + 1)
    for i in range(1, la + 1):
        for j in range(1, lb + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            d[i, j] = min(d[i - 1, j] + 1, d[i, j - 1] + 1, d[i - 1, j - 1] + cost)
    return int(d[la, lb])


def assert_valid_alignment(assign, n, t):
    assert assign.shape == (t,)
    assert assign[0] == 0
    assert assign[-1] == n - 1
    steps = np.diff(assign)
    assert np.all((steps == 0) | (steps == 1))
    assert set(assign.tolist()) == set(range(n))


@pytest.fixture(params=[False, True], ids=["numba", "numpy"])
def kernel_env(request, monkeypatch):
    if request.param:
        monkeypatch.setenv("PPTTS_DISABLE_NUMBA", "1")
    else:
        monkeypatch.delenv("PPTTS_DISABLE_NUMBA", raising=False)
    return request.param


class TestMas:
    def test_matches_brute_force(self, kernel_env):
        rng = np.random.default_rng(0)
        for n in range(1, 5):
            for t in range(n, 9):
                for _ in range(20):
                    grid = rng.normal(size=(n, t))
                    assign = _kernels.mas_assignment(grid)
                    assert_valid_alignment(assign, n, t)
                    got = grid[assign, np.arange(t)].sum()
                    want, _ = brute_force_alignment(grid)
                    assert abs(got - want) < 1e-9

    def test_single_token(self, kernel_env):
        grid = np.zeros((1, 5))
        assert _kernels.mas_assignment(grid).tolist() == [0] * 5

    def test_square_grid_is_diagonal(self, kernel_env):
        grid = np.random.default_rng(1).normal(size=(3, 3))
        assert _kernels.mas_assignment(grid).tolist() == [0, 1, 2]

    def test_tie_prefers_staying(self, kernel_env):
        # All-zero grid: every alignment scores 0; the tie rule keeps the
        # path on its current token, so advances happen as early as possible.
        assert _kernels.mas_assignment(np.zeros((2, 3))).tolist() == [0, 1, 1]
        assert _kernels.mas_assignment(np.zeros((3, 5))).tolist() == [0, 1, 2, 2, 2]

    def test_constant_shift_invariance(self, kernel_env):
        rng = np.random.default_rng(2)
        for _ in range(50):
            grid = rng.normal(size=(3, 7))
            a = _kernels.mas_assignment(grid)
            b = _kernels.mas_assignment(grid + 17.25)
            assert np.array_equal(a, b)

    def test_rejects_more_tokens_than_frames(self, kernel_env):
        with pytest.raises(ValueError):
            _kernels.mas_assignment(np.zeros((4, 3)))

    def test_rejects_empty(self, kernel_env):
        with pytest.raises(ValueError):
            _kernels.mas_assignment(np.zeros((0, 3)))

    def test_paths_agree(self):
        rng = np.random.default_rng(3)
        import os

        for _ in range(50):
            grid = rng.normal(size=(4, 8))
            os.environ.pop("PPTTS_DISABLE_NUMBA", None)
            a = _kernels.mas_assignment(grid)
            os.environ["PPTTS_DISABLE_NUMBA"] = "1"
            try:
                b = _kernels.mas_assignment(grid)
            finally:
                os.environ.pop("PPTTS_DISABLE_NUMBA", None)
            assert np.array_equal(a, b)


class TestLevenshtein:
    def test_known_cases(self, kernel_env):
        def ids(s):
            return np.array([ord(c) for c in s], dtype=np.int64)

        assert _kernels.levenshtein(ids("kitten"), ids("sitting")) == 3
        assert _kernels.levenshtein(ids("abc"), ids("abc")) == 0
        assert _kernels.levenshtein(ids(""), ids("abc")) == 3
        assert _kernels.levenshtein(ids("abcd"), ids("")) == 4
        assert _kernels.levenshtein(ids("flaw"), ids("lawn")) == 2

    def test_matches_dp_matrix(self, kernel_env):
        rng = np.random.default_rng(4)
        for _ in range(100):
            a = rng.integers(0, 5, size=rng.integers(0, 12))
            b = rng.integers(0, 5, size=rng.integers(0, 12))
            assert _kernels.levenshtein(a, b) == dp_matrix_levenshtein(a, b)

    def test_symmetry(self, kernel_env):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a = rng.integers(0, 4, size=rng.integers(1, 10))
            b = rng.integers(0, 4, size=rng.integers(1, 10))
            assert _kernels.levenshtein(a, b) == _kernels.levenshtein(b, a)


class TestNearestCentroids:
    def test_matches_brute_force(self, kernel_env):
        rng = np.random.default_rng(6)
        points = rng.normal(size=(200, 7))
        centroids = rng.normal(size=(11, 7))
        ids, d2 = _kernels.nearest_centroids(points, centroids)
        want_d2 = np.square(points[:, None, :] - centroids[None, :, :]).sum(axis=2)
        assert np.allclose(d2, want_d2.min(axis=1), atol=1e-9)
        # Assignments must agree wherever the argmin gap is unambiguous.
        sorted_d = np.sort(want_d2, axis=1)
        clear = sorted_d[:, 1] - sorted_d[:, 0] > 1e-9
        assert np.array_equal(ids[clear], np.argmin(want_d2, axis=1)[clear])

    def test_tie_goes_to_lowest_index(self, kernel_env):
        points = np.array([[0.0, 0.0]])
        centroids = np.array([[1.0, 0.0], [-1.0, 0.0]])
        ids, d2 = _kernels.nearest_centroids(points, centroids)
        assert ids[0] == 0
        assert d2[0] == 1.0

    def test_dimension_mismatch(self, kernel_env):
        with pytest.raises(ValueError):
            _kernels.nearest_centroids(np.zeros((3, 2)), np.zeros((4, 3)))


def test_flag_reported():
    import os

    os.environ["PPTTS_DISABLE_NUMBA"] = "1"
    try:
        assert not _kernels.numba_enabled()
    finally:
        os.environ.pop("PPTTS_DISABLE_NUMBA", None)
