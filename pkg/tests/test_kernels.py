import itertools
import os
import subprocess
import sys

import numpy as np
import pytest

from crossview import kernels

PAIRS = [
    (kernels._hungarian_loop, kernels._hungarian_np),
    (kernels._greedy_loop, kernels._greedy_np),
]


def brute_force_max(S):
    n, m = S.shape
    best, arg = -np.inf, None
    for cols in itertools.permutations(range(m), n):
        total = S[np.arange(n), cols].sum()
        if total > best:
            best, arg = total, cols
    return best, arg


@pytest.mark.parametrize("jit_fn,np_fn", PAIRS)
def test_both_paths_agree_on_assignment(jit_fn, np_fn):
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 9))
        S = rng.random((n, m))
        if rng.random() < 0.3:
            S = np.round(S, 1)  # exercise ties
        assert np.array_equal(jit_fn(S), np_fn(S))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(200):
        n = int(rng.integers(1, 8))
        S = rng.uniform(-1, 1, size=(n, n))
        best, _ = brute_force_max(S)
        pi = kernels.hungarian_min(-S)
        assert sorted(pi.tolist()) == list(range(n))
        assert S[np.arange(n), pi].sum() == pytest.approx(best, abs=1e-12)


def test_hungarian_rectangular_and_errors():
    S = np.array([[0.1, 0.9, 0.3], [0.8, 0.7, 0.0]])
    assert kernels.hungarian_min(-S).tolist() == [1, 0]
    with pytest.raises(ValueError):
        kernels.hungarian_min(np.zeros((3, 2)))
    assert kernels.hungarian_min(np.zeros((0, 3))).shape == (0,)


def test_greedy_ties_prefer_lower_row_then_col():
    S = np.ones((3, 3))
    assert kernels.greedy_max(S).tolist() == [0, 1, 2]
    S = np.array([[0.5, 0.9], [0.9, 0.5]])
    assert kernels.greedy_max(S).tolist() == [1, 0]


def test_raster_paths_agree_and_fill_centers():
    rng = np.random.default_rng(2)
    for _ in range(30):
        hull = kernels.convex_hull(rng.uniform(-10, 60, size=(6, 2)))
        a = kernels._raster_loop(hull, 48, 40)
        b = kernels._raster_np(hull, 48, 40)
        assert np.array_equal(a, b)
    square = kernels.convex_hull([[2, 2], [6, 2], [6, 5], [2, 5]])
    m = kernels.rasterize_convex(square, 10, 10)
    assert m.sum() == 12 and m[2:5, 2:6].all()


def test_convex_hull_drops_interior_points():
    pts = [[0, 0], [4, 0], [4, 4], [0, 4], [2, 2], [1, 3]]
    hull = kernels.convex_hull(pts)
    assert len(hull) == 4


def test_zbuffer_paths_agree_and_tie_to_lower_index():
    rng = np.random.default_rng(3)
    masks = (rng.random((5, 20, 20)) < 0.5).astype(np.uint8)
    depths = np.array([3.0, 1.0, 1.0, 2.0, 0.5])
    assert np.array_equal(kernels._zbuffer_loop(masks, depths), kernels._zbuffer_np(masks, depths))
    both = np.ones((2, 2, 2), dtype=np.uint8)
    assert (kernels.zbuffer(both, np.array([1.0, 1.0])) == 0).all()
    assert (kernels.zbuffer(np.zeros((1, 2, 2)), np.ones(1)) == -1).all()


def test_nearest_centroid_paths_agree():
    rng = np.random.default_rng(4)
    pts, cents = rng.normal(size=(300, 8)), rng.normal(size=(6, 8))
    la, da = kernels._assign_loop(pts, cents)
    lb, db = kernels._assign_np(pts, cents)
    assert np.array_equal(la, lb)
    assert np.allclose(da, db, rtol=1e-12, atol=1e-12)


def test_env_flag_selects_numpy_path():
    code = ("import numpy as np; from crossview import _accel, kernels; "
            "S = np.random.default_rng(5).random((6, 7)); "
            "print(_accel.USE_NUMBA, kernels.hungarian_min(-S).tolist(), kernels.greedy_max(S).tolist())")
    env = dict(os.environ, CROSSVIEW_NUMBA="0")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True).stdout
    flag, rest = out.split(" ", 1)
    assert flag == "False"
    S = np.random.default_rng(5).random((6, 7))
    assert rest.strip() == f"{kernels.hungarian_min(-S).tolist()} {kernels.greedy_max(S).tolist()}"
