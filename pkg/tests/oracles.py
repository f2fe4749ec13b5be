"""Slow, obviously-correct reference implementations used only by the tests."""
from __future__ import annotations

import itertools
import math
from collections import deque

import numpy as np


def conv3d_loops(x, k, b, stride, padding):
    """Direct seven-loop cross-correlation."""
    c_in, d, h, w = x.shape
    c_out, _, ks, _, _ = k.shape
    xp = np.zeros((c_in, d + 2 * padding, h + 2 * padding, w + 2 * padding))
    xp[:, padding:padding + d, padding:padding + h, padding:padding + w] = x
    do = (d + 2 * padding - ks) // stride + 1
    ho = (h + 2 * padding - ks) // stride + 1
    wo = (w + 2 * padding - ks) // stride + 1
    out = np.zeros((c_out, do, ho, wo))
    for o in range(c_out):
        for z in range(do):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for c in range(c_in):
                        for a in range(ks):
                            for e in range(ks):
                                for f in range(ks):
                                    acc += k[o, c, a, e, f] * xp[c, z * stride + a, y * stride + e,
                                                                 xx * stride + f]
                    out[o, z, y, xx] = acc
    return out


NEIGHBOURS_26 = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]


def bfs_components(mask):
    """List of voxel sets, one per 27-connected component (BFS flood fill)."""
    mask = np.asarray(mask) != 0
    seen = np.zeros(mask.shape, dtype=bool)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = set(), deque([start])
        while queue:
            v = queue.popleft()
            comp.add(v)
            for dv in NEIGHBOURS_26:
                u = tuple(a + b for a, b in zip(v, dv))
                if all(0 <= u[i] < mask.shape[i] for i in range(3)) and mask[u] and not seen[u]:
                    seen[u] = True
                    queue.append(u)
        comps.append(frozenset(comp))
    return comps


def partition_of(labels):
    """Set of voxel sets described by an integer label volume."""
    parts = {}
    for v in zip(*np.nonzero(labels)):
        parts.setdefault(int(labels[v]), set()).add(tuple(int(i) for i in v))
    return {frozenset(s) for s in parts.values()}


def lesion_metrics_bruteforce(pred_bin, gt):
    pcs = bfs_components(pred_bin)
    gcs = bfs_components(gt)
    detected = sum(1 for g in gcs if any(g & p for p in pcs))
    fps = sum(1 for p in pcs if not any(p & g for g in gcs))
    ltpr = detected / len(gcs) if gcs else 1.0
    lfpr = fps / len(pcs) if pcs else 0.0
    pset = set().union(*pcs) if pcs else set()
    gset = set().union(*gcs) if gcs else set()
    denom = len(pset) + len(gset)
    dice = 1.0 if denom == 0 else 2 * len(pset & gset) / denom
    return dice, ltpr, lfpr, fps


def sigmoid(v):
    return 1.0 / (1.0 + math.exp(-v))


def scalar_gru(h, x, w):
    """One GRU update on scalars; ``w`` maps names like 'w_z' to floats."""
    z = sigmoid(w["w_z"] * x + w["u_z"] * h + w["b_z"])
    r = sigmoid(w["w_r"] * x + w["u_r"] * h + w["b_r"])
    c = math.tanh(w["w_h"] * x + w["u_h"] * (r * h) + w["b_h"])
    return (1 - z) * h + z * c


def in_ellipsoid(point, center, radii):
    return sum(((p - c) / r) ** 2 for p, c, r in zip(point, center, radii)) <= 1.0


def coverage_enumeration(n, tile, origins):
    return [sum(1 for o in origins if o <= i < o + tile) for i in range(n)]


def scalar_adam(grad_fn, x, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    xs = []
    for t in range(1, steps + 1):
        g = grad_fn(x)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        xs.append(x)
    return xs
