"""Parity between the numba kernels and their pure-numpy fallbacks."""

import os
import subprocess
import sys

import numpy as np
import pytest

from moelab import _kernels as K

needs_numba = pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")


@needs_numba
def test_index_add_rows_parity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        n, d, m = rng.integers(2, 50), rng.integers(1, 16), rng.integers(1, 200)
        idx = rng.integers(0, n, size=m).astype(np.int64)
        rows = rng.normal(size=(m, d))
        a = np.zeros((n, d))
        b = np.zeros((n, d))
        K.index_add_rows_np(a, idx, rows)
        K.index_add_rows_nb(b, idx, rows)
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_numba
def test_scatter_add_lastdim_parity():
    rng = np.random.default_rng(1)
    for _ in range(20):
        r, e = rng.integers(1, 40), rng.integers(2, 10)
        k = int(rng.integers(1, e + 1))
        idx = rng.integers(0, e, size=(r, k)).astype(np.int64)
        vals = rng.normal(size=(r, k))
        a = np.zeros((r, e))
        b = np.zeros((r, e))
        K.scatter_add_lastdim_np(a, idx, vals)
        K.scatter_add_lastdim_nb(b, idx, vals)
        np.testing.assert_allclose(a, b, atol=1e-12)


@needs_numba
def test_scatter_add_pairs_parity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        n, k, m = rng.integers(2, 30), rng.integers(1, 8), rng.integers(1, 100)
        rows = rng.integers(0, n, size=m).astype(np.int64)
        cols = rng.integers(0, k, size=m).astype(np.int64)
        vals = rng.normal(size=m)
        a = np.zeros((n, k))
        b = np.zeros((n, k))
        K.scatter_add_pairs_np(a, rows, cols, vals)
        K.scatter_add_pairs_nb(b, rows, cols, vals)
        np.testing.assert_allclose(a, b, atol=1e-12)


def _random_selection(rng, b, t, e, k):
    sel = np.empty((b, t, k), dtype=np.int64)
    for bi in range(b):
        for ti in range(t):
            sel[bi, ti] = rng.choice(e, size=k, replace=False)
    return sel


@needs_numba
def test_transition_count_parity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(e, 4) + 1))
        sel = _random_selection(rng, int(rng.integers(1, 4)), int(rng.integers(1, 20)), e, k)
        assert K.transition_count_np(sel, e) == K.transition_count_nb(sel, e)


@needs_numba
def test_swap_in_counts_parity():
    rng = np.random.default_rng(4)
    for _ in range(50):
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, min(e, 4) + 1))
        sel = _random_selection(rng, int(rng.integers(1, 4)), int(rng.integers(1, 20)), e, k)
        np.testing.assert_array_equal(
            K.swap_in_counts_np(sel, e), K.swap_in_counts_nb(sel, e)
        )


@needs_numba
def test_usage_counts_parity():
    rng = np.random.default_rng(5)
    for _ in range(50):
        e = int(rng.integers(2, 9))
        k = int(rng.integers(1, e + 1))
        sel = rng.integers(0, e, size=(int(rng.integers(1, 5)), int(rng.integers(1, 20)), k))
        np.testing.assert_array_equal(
            K.usage_counts_np(sel, e), K.usage_counts_nb(sel, e)
        )


@needs_numba
def test_topk_parity_and_tie_breaking():
    rng = np.random.default_rng(6)
    for _ in range(50):
        r, e = int(rng.integers(1, 20)), int(rng.integers(2, 9))
        k = int(rng.integers(1, e + 1))
        w = np.ascontiguousarray(rng.normal(size=(r, e)))
        if rng.random() < 0.5:  # force ties
            w[:, : e // 2 + 1] = 0.5
        np.testing.assert_array_equal(K.topk_lastdim_np(w, k), K.topk_lastdim_nb(w, k))


def test_topk_lowest_index_wins_on_ties():
    w = np.array([[0.3, 0.5, 0.5, 0.1]])
    assert K.topk_lastdim(w, 2).tolist() == [[1, 2]]
    uniform = np.zeros((1, 5))
    assert K.topk_lastdim(uniform, 3).tolist() == [[0, 1, 2]]


def test_env_flag_selects_numpy_fallback():
    env = dict(os.environ, MOELAB_DISABLE_NUMBA="1")
    code = (
        "from moelab import _kernels as K; "
        "assert not K.USE_NUMBA; "
        "assert K.transition_count is K.transition_count_np"
    )
    subprocess.run([sys.executable, "-c", code], check=True, env=env)
