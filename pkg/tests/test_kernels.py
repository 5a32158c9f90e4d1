"""The numba and numpy kernel paths must agree."""

import numpy as np
import pytest

from xmodal import _kernels as K


def test_zbuffer_paths_agree():
    rng = np.random.default_rng(0)
    n = 500
    rows = rng.integers(-2, 10, n)
    cols = rng.integers(-2, 12, n)
    depth = rng.choice([0.5, 1.0, 1.5, -1.0], n)
    value = rng.uniform(0, 1, n)
    a = K.zbuffer_splat_numpy(rows, cols, depth, value, 8, 10)
    b = K.zbuffer_splat_numba(rows, cols, depth, value, 8, 10)
    assert np.array_equal(a, b)


def test_zbuffer_tie_goes_to_first_point():
    rows = np.array([1, 1], dtype=np.int64)
    cols = np.array([1, 1], dtype=np.int64)
    depth = np.array([2.0, 2.0])
    value = np.array([0.25, 0.75])
    for fn in (K.zbuffer_splat_numpy, K.zbuffer_splat_numba):
        assert fn(rows, cols, depth, value, 3, 3)[1, 1] == 0.25


def test_knn_paths_agree():
    rng = np.random.default_rng(1)
    pts = rng.integers(0, 3, (40, 3)).astype(float)  # many ties
    assert np.array_equal(K.knn_indices_numpy(pts, 6), K.knn_indices_numba(pts, 6))


@pytest.mark.parametrize("stride", [1, 2])
def test_col2im_paths_agree(stride):
    rng = np.random.default_rng(stride)
    h = w = 9
    kh = kw = 3
    ho = wo = (h - kh) // stride + 1
    cols = rng.normal(size=(2, 3, kh, kw, ho, wo))
    assert np.allclose(K.col2im_numpy(cols, h, w, stride), K.col2im_numba(cols, h, w, stride), atol=1e-14)


def test_scatter_add_paths_agree():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(100, 5))
    idx = rng.integers(0, 7, 100)
    assert np.array_equal(K.scatter_add_rows_numpy(src, idx, 7), K.scatter_add_rows_numba(src, idx, 7))


def test_trilinear_paths_agree_and_hit_grid_nodes():
    rng = np.random.default_rng(3)
    grid = rng.normal(size=(4, 4, 4, 3))
    pts = rng.uniform(-1, 1, (200, 3))
    lo, hi = pts.min(0), pts.max(0)
    assert np.allclose(K.trilinear_numpy(pts, grid, lo, hi), K.trilinear_numba(pts, grid, lo, hi), atol=1e-14)
    corners = np.array([lo, hi])
    out = K.trilinear_numpy(corners, grid, lo, hi)
    assert np.allclose(out[0], grid[0, 0, 0]) and np.allclose(out[1], grid[3, 3, 3])


def test_fnv_paths_agree():
    for buf in (b"", b"a", bytes(range(256)) * 5):
        assert K.fnv1a64_numpy(buf) == K.fnv1a64_numba(buf)
    assert K.fnv1a64_numpy(b"a") == 0xAF63DC4C8601EC8C


def test_backend_flag():
    assert K.backend() in ("numba", "numpy")


def test_leaky_paths_agree_bitwise():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(37, 5))
    x[0, :3] = [0.0, -0.0, 1e-300]
    g = rng.normal(size=x.shape)
    assert np.array_equal(K.leaky_forward_numpy(x, 0.01), K.leaky_forward_numba(x, 0.01))
    assert np.array_equal(K.leaky_backward_numpy(g, x, 0.01), K.leaky_backward_numba(g, x, 0.01))
    assert K.leaky_forward_numba(np.array([-2.0, 3.0]), 0.01).tolist() == [-0.02, 3.0]


def test_every_kernel_has_both_paths():
    for name in K.KERNELS:
        assert callable(getattr(K, f"{name}_numpy")) and callable(getattr(K, f"{name}_numba"))
        assert getattr(K, name) is getattr(K, f"{name}_{K.backend()}")
