"""Hot inner loops, compiled with numba when available.

Every kernel has two implementations that return bit-identical results:
an explicit-loop version compiled with ``numba.njit`` and a vectorized
pure-numpy version. The environment variable ``LACT_BACKEND`` selects one
(``numba`` or ``numpy``); the default is numba when it can be imported.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None
    HAS_NUMBA = False

_requested = os.environ.get("LACT_BACKEND", "numba" if HAS_NUMBA else "numpy").lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"LACT_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAS_NUMBA) else "numpy"


def _njit(fn):
    if HAS_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------

@_njit
def _im2col_loops(xp, k, stride, do, ho, wo):
    c_in = xp.shape[0]
    cols = np.empty((c_in * k * k * k, do * ho * wo), dtype=xp.dtype)
    for c in range(c_in):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    row = ((c * k + a) * k + b) * k + e
                    n = 0
                    for z in range(do):
                        zz = z * stride + a
                        for y in range(ho):
                            yy = y * stride + b
                            for x in range(wo):
                                cols[row, n] = xp[c, zz, yy, x * stride + e]
                                n += 1
    return cols


def _im2col_numpy(xp, k, stride, do, ho, wo):
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    win = win[:, ::stride, ::stride, ::stride][:, :do, :ho, :wo]
    # (C, Do, Ho, Wo, k, k, k) -> (C, k, k, k, Do, Ho, Wo)
    win = win.transpose(0, 4, 5, 6, 1, 2, 3)
    return np.ascontiguousarray(win).reshape(xp.shape[0] * k ** 3, do * ho * wo)


@_njit
def _col2im_loops(cols, c_in, dp, hp, wp, k, stride, do, ho, wo):
    out = np.zeros((c_in, dp, hp, wp), dtype=cols.dtype)
    for c in range(c_in):
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    row = ((c * k + a) * k + b) * k + e
                    n = 0
                    for z in range(do):
                        zz = z * stride + a
                        for y in range(ho):
                            yy = y * stride + b
                            for x in range(wo):
                                out[c, zz, yy, x * stride + e] += cols[row, n]
                                n += 1
    return out


def _col2im_numpy(cols, c_in, dp, hp, wp, k, stride, do, ho, wo):
    out = np.zeros((c_in, dp, hp, wp), dtype=cols.dtype)
    c6 = cols.reshape(c_in, k, k, k, do, ho, wo)
    s = stride
    for a in range(k):
        for b in range(k):
            for e in range(k):
                out[:, a:a + s * do:s, b:b + s * ho:s, e:e + s * wo:s] += c6[:, a, b, e]
    return out


def im2col(xp: np.ndarray, k: int, stride: int, out_shape) -> np.ndarray:
    """Unfold a padded ``[C, D, H, W]`` volume into ``[C*k^3, D'*H'*W']`` columns."""
    do, ho, wo = out_shape
    if BACKEND == "numba":
        return _im2col_loops(np.ascontiguousarray(xp), k, stride, do, ho, wo)
    return _im2col_numpy(xp, k, stride, do, ho, wo)


def col2im(cols: np.ndarray, padded_shape, k: int, stride: int, out_shape) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the padded volume."""
    c_in, dp, hp, wp = padded_shape
    do, ho, wo = out_shape
    if BACKEND == "numba":
        return _col2im_loops(np.ascontiguousarray(cols), c_in, dp, hp, wp, k, stride, do, ho, wo)
    return _col2im_numpy(cols, c_in, dp, hp, wp, k, stride, do, ho, wo)


# ---------------------------------------------------------------------------
# 27-connected component labeling
# ---------------------------------------------------------------------------

@_njit
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@_njit
def _label27_loops(mask):
    d, h, w = mask.shape
    n = d * h * w
    flat = mask.ravel()
    parent = np.arange(n)
    for z in range(d):
        for y in range(h):
            for x in range(w):
                i = (z * h + y) * w + x
                if not flat[i]:
                    continue
                # the 13 neighbours that precede i in raster order
                for dz in range(-1, 1):
                    for dy in range(-1, 2):
                        for dx in range(-1, 2):
                            if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                                continue
                            zz = z + dz
                            yy = y + dy
                            xx = x + dx
                            if zz < 0 or yy < 0 or yy >= h or xx < 0 or xx >= w:
                                continue
                            j = (zz * h + yy) * w + xx
                            if flat[j]:
                                ri = _find(parent, i)
                                rj = _find(parent, j)
                                if ri < rj:
                                    parent[rj] = ri
                                elif rj < ri:
                                    parent[ri] = rj
    labels = np.zeros(n, dtype=np.int64)
    dense = np.zeros(n, dtype=np.int64)
    count = 0
    for i in range(n):
        if flat[i]:
            r = _find(parent, i)
            if dense[r] == 0:
                count += 1
                dense[r] = count
            labels[i] = dense[r]
    return labels.reshape((d, h, w)), count


def _label27_numpy(mask):
    # Min-index propagation: every component converges to the flat index of
    # its first voxel in raster order, which is also its first-encounter rank.
    d, h, w = mask.shape
    big = d * h * w
    idx = np.arange(big, dtype=np.int64).reshape(d, h, w)
    lab = np.where(mask, idx, big)
    while True:
        padded = np.pad(lab, 1, constant_values=big)
        best = lab.copy()
        for dz in range(3):
            for dy in range(3):
                for dx in range(3):
                    np.minimum(best, padded[dz:dz + d, dy:dy + h, dx:dx + w], out=best)
        best = np.where(mask, best, big)
        if np.array_equal(best, lab):
            break
        lab = best
    labels = np.zeros((d, h, w), dtype=np.int64)
    roots = np.unique(lab[mask])
    if roots.size:
        labels[mask] = np.searchsorted(roots, lab[mask]) + 1
    return labels, int(roots.size)


def label27(mask: np.ndarray):
    """Label 27-connected foreground components; ids follow first raster encounter."""
    m = np.ascontiguousarray(mask, dtype=np.bool_)
    if BACKEND == "numba":
        labels, count = _label27_loops(m)
        return labels, int(count)
    return _label27_numpy(m)
