"""Hot inner loops, each with a numba and a pure-numpy implementation.

The numba path is used when numba imports and ``XMODAL_DISABLE_NUMBA`` is
unset (or "0"). Both paths are always importable as ``<name>_numpy`` and
``<name>_numba`` so tests and the benchmark can compare them directly.
"""

import os

import numpy as np

try:
    import numba as nb

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    nb = None
    HAVE_NUMBA = False


def _numba_requested():
    flag = os.environ.get("XMODAL_DISABLE_NUMBA", "").strip().lower()
    return flag in ("", "0", "false", "no")


USE_NUMBA = HAVE_NUMBA and _numba_requested()

kwd = {"cache": True, "nogil": True}


def _njit(fn):
    if not HAVE_NUMBA:
        return fn
    return nb.njit(**kwd)(fn)


# --------------------------------------------------------------------------
# depth-buffered point splatting


def zbuffer_splat_numpy(rows, cols, depth, value, height, width):
    img = np.zeros((height, width))
    keep = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width) & (depth > 0)
    if not keep.any():
        return img
    idx = np.flatnonzero(keep)
    pix = rows[idx] * width + cols[idx]
    order = np.lexsort((idx, depth[idx], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    img.flat[pix_sorted[first]] = value[idx[order[first]]]
    return img


@_njit
def zbuffer_splat_numba(rows, cols, depth, value, height, width):
    img = np.zeros((height, width))
    zbuf = np.full((height, width), np.inf)
    for n in range(rows.shape[0]):
        r = rows[n]
        c = cols[n]
        z = depth[n]
        if r < 0 or r >= height or c < 0 or c >= width or not z > 0:
            continue
        # strict comparison: earlier point wins on equal depth
        if z < zbuf[r, c]:
            zbuf[r, c] = z
            img[r, c] = value[n]
    return img


# --------------------------------------------------------------------------
# k nearest neighbours (self excluded, ties to the smaller index)


def knn_indices_numpy(points, k):
    diff = points[:, None, :] - points[None, :, :]
    d2 = diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]
    np.fill_diagonal(d2, np.inf)
    order = np.argsort(d2, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


@_njit
def knn_indices_numba(points, k):
    n = points.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    d2 = np.empty(n)
    for i in range(n):
        for j in range(n):
            if i == j:
                d2[j] = np.inf
            else:
                dx = points[i, 0] - points[j, 0]
                dy = points[i, 1] - points[j, 1]
                dz = points[i, 2] - points[j, 2]
                d2[j] = dx * dx + dy * dy + dz * dz
        order = np.argsort(d2, kind="mergesort")
        for m in range(k):
            out[i, m] = order[m]
    return out


# --------------------------------------------------------------------------
# col2im: scatter-add of patch columns back to the image grid (conv backward)


def col2im_numpy(cols, height, width, stride):
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, height, width))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


@_njit
def col2im_numba(cols, height, width, stride):
    b, c, kh, kw, ho, wo = cols.shape
    out = np.zeros((b, c, height, width))
    for n in range(b):
        for ch in range(c):
            for i in range(kh):
                for j in range(kw):
                    for y in range(ho):
                        for x in range(wo):
                            out[n, ch, i + stride * y, j + stride * x] += cols[n, ch, i, j, y, x]
    return out


# --------------------------------------------------------------------------
# scatter-add of rows (gather backward)


def scatter_add_rows_numpy(src, idx, n_rows):
    out = np.zeros((n_rows, src.shape[1]))
    np.add.at(out, idx, src)
    return out


@_njit
def scatter_add_rows_numba(src, idx, n_rows):
    out = np.zeros((n_rows, src.shape[1]))
    for m in range(src.shape[0]):
        r = idx[m]
        for f in range(src.shape[1]):
            out[r, f] += src[m, f]
    return out


# --------------------------------------------------------------------------
# trilinear interpolation of a vector field stored on a g x g x g grid


def trilinear_numpy(points, grid, lo, hi):
    g = grid.shape[0]
    extent = hi - lo
    safe = np.where(extent > 0, extent, 1.0)
    u = np.where(extent > 0, (points - lo) / safe, 0.0) * (g - 1)
    base = np.clip(np.floor(u).astype(np.int64), 0, g - 2)
    frac = np.clip(u - base, 0.0, 1.0)
    out = np.zeros_like(points)
    for dx in (0, 1):
        wx = frac[:, 0] if dx else 1.0 - frac[:, 0]
        for dy in (0, 1):
            wy = frac[:, 1] if dy else 1.0 - frac[:, 1]
            for dz in (0, 1):
                wz = frac[:, 2] if dz else 1.0 - frac[:, 2]
                corner = grid[base[:, 0] + dx, base[:, 1] + dy, base[:, 2] + dz]
                out += (wx * wy * wz)[:, None] * corner
    return out


@_njit
def trilinear_numba(points, grid, lo, hi):
    g = grid.shape[0]
    n = points.shape[0]
    out = np.zeros((n, 3))
    base = np.empty(3, dtype=np.int64)
    frac = np.empty(3)
    for p in range(n):
        for a in range(3):
            ext = hi[a] - lo[a]
            u = (points[p, a] - lo[a]) / ext * (g - 1) if ext > 0 else 0.0
            b = int(np.floor(u))
            b = min(max(b, 0), g - 2)
            base[a] = b
            frac[a] = min(max(u - b, 0.0), 1.0)
        for dx in range(2):
            wx = frac[0] if dx else 1.0 - frac[0]
            for dy in range(2):
                wy = frac[1] if dy else 1.0 - frac[1]
                for dz in range(2):
                    wz = frac[2] if dz else 1.0 - frac[2]
                    w = wx * wy * wz
                    for a in range(3):
                        out[p, a] += w * grid[base[0] + dx, base[1] + dy, base[2] + dz, a]
    return out


# --------------------------------------------------------------------------
# leaky rectifier, forward and backward


def leaky_forward_numpy(x, slope):
    return np.where(x > 0, x, slope * x)


@_njit
def leaky_forward_numba(x, slope):
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.shape[0]):
        v = flat[i]
        out[i] = v if v > 0 else slope * v
    return out.reshape(x.shape)


def leaky_backward_numpy(g, x, slope):
    return np.where(x > 0, g, slope * g)


@_njit
def leaky_backward_numba(g, x, slope):
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    out = np.empty_like(gf)
    for i in range(gf.shape[0]):
        out[i] = gf[i] if xf[i] > 0 else slope * gf[i]
    return out.reshape(g.shape)


# --------------------------------------------------------------------------
# 64-bit FNV-1a over a byte buffer


FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


def fnv1a64_numpy(buf):
    h = FNV_OFFSET
    for byte in bytes(buf):
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@_njit
def _fnv1a64_loop(arr):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for i in range(arr.shape[0]):
        h = (h ^ np.uint64(arr[i])) * prime
    return h


def fnv1a64_numba(buf):
    return int(_fnv1a64_loop(np.frombuffer(bytes(buf), dtype=np.uint8)))


# --------------------------------------------------------------------------
# dispatch

KERNELS = ("zbuffer_splat", "knn_indices", "col2im", "scatter_add_rows", "trilinear", "fnv1a64",
           "leaky_forward", "leaky_backward")

_suffix = "numba" if USE_NUMBA else "numpy"
zbuffer_splat = globals()[f"zbuffer_splat_{_suffix}"]
knn_indices = globals()[f"knn_indices_{_suffix}"]
col2im = globals()[f"col2im_{_suffix}"]
scatter_add_rows = globals()[f"scatter_add_rows_{_suffix}"]
trilinear = globals()[f"trilinear_{_suffix}"]
leaky_forward = globals()[f"leaky_forward_{_suffix}"]
leaky_backward = globals()[f"leaky_backward_{_suffix}"]
fnv1a64 = globals()[f"fnv1a64_{_suffix}"]


def backend():
    """Name of the active kernel backend ("numba" or "numpy")."""
    return _suffix
