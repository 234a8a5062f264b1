"""Hot inner loops.

Every kernel exists twice: a loop version compiled with numba and a
vectorised numpy version. The public names at the bottom of the module point at
whichever one ``_accel.USE_NUMBA`` selects; both are importable directly so
tests and the benchmark can compare them.
"""
import math

import numpy as np
from scipy.spatial import cKDTree

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------------------
# local outlier factor
# ---------------------------------------------------------------------------


@njit
def _pair_dist(P, i, j, min_dist):
    s = 0.0
    for c in range(P.shape[1]):
        d = P[i, c] - P[j, c]
        s += d * d
    d = math.sqrt(s)
    if d < min_dist:
        return min_dist
    return d


@njit
def lof_numba(P, k, min_dist):
    n = P.shape[0]
    kdist = np.empty(n)
    buf = np.empty(k)
    for i in range(n):
        m = 0
        for j in range(n):
            if j == i:
                continue
            d = _pair_dist(P, i, j, min_dist)
            if m < k:
                pos = m
                m += 1
            elif d < buf[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and buf[pos - 1] > d:
                buf[pos] = buf[pos - 1]
                pos -= 1
            buf[pos] = d
        kdist[i] = buf[k - 1]

    lrd = np.empty(n)
    for i in range(n):
        s = 0.0
        cnt = 0
        for j in range(n):
            if j == i:
                continue
            d = _pair_dist(P, i, j, min_dist)
            if d <= kdist[i]:
                s += max(kdist[j], d)
                cnt += 1
        lrd[i] = cnt / s

    lof = np.empty(n)
    for i in range(n):
        s = 0.0
        cnt = 0
        for j in range(n):
            if j == i:
                continue
            d = _pair_dist(P, i, j, min_dist)
            if d <= kdist[i]:
                s += lrd[j]
                cnt += 1
        lof[i] = s / cnt / lrd[i]
    return lof


def _dist_rows(P, start, stop, min_dist):
    diff = P[start:stop, None, :] - P[None, :, :]
    sq = np.zeros(diff.shape[:2])
    for c in range(P.shape[1]):
        sq += diff[:, :, c] * diff[:, :, c]
    D = np.maximum(np.sqrt(sq), min_dist)
    D[np.arange(stop - start), np.arange(start, stop)] = np.inf
    return D


def lof_numpy(P, k, min_dist, chunk=512):
    P = np.asarray(P, dtype=np.float64)
    n = P.shape[0]
    kdist = np.empty(n)
    for s in range(0, n, chunk):
        D = _dist_rows(P, s, min(n, s + chunk), min_dist)
        kdist[s : s + D.shape[0]] = np.partition(D, k - 1, axis=1)[:, k - 1]

    lrd = np.empty(n)
    for s in range(0, n, chunk):
        D = _dist_rows(P, s, min(n, s + chunk), min_dist)
        nb = D <= kdist[s : s + D.shape[0], None]
        rd = np.where(nb, np.maximum(kdist[None, :], D), 0.0)
        lrd[s : s + D.shape[0]] = nb.sum(axis=1) / rd.sum(axis=1)

    lof = np.empty(n)
    for s in range(0, n, chunk):
        D = _dist_rows(P, s, min(n, s + chunk), min_dist)
        nb = D <= kdist[s : s + D.shape[0], None]
        tot = np.where(nb, lrd[None, :], 0.0).sum(axis=1)
        lof[s : s + D.shape[0]] = tot / nb.sum(axis=1) / lrd[s : s + D.shape[0]]
    return lof


def lof_tree(P, k, min_dist):
    """LOF with neighbourhoods found by a k-d tree; for large point sets.

    The tree only proposes candidates. Distances, k-distances and the
    tie-inclusive neighbourhoods are recomputed with the brute-force formula,
    so the result agrees with :func:`lof_numpy`.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    n = P.shape[0]
    tree = cKDTree(P)
    # k + 1 nearest includes the point itself (or one of its duplicates)
    d, _ = tree.query(P, k=k + 1)
    radius = np.maximum(d[:, k], min_dist) * (1.0 + 1e-9) + 1e-12
    lists = tree.query_ball_point(P, radius)
    counts = np.fromiter((len(c) for c in lists), dtype=np.int64, count=n)
    rows = np.repeat(np.arange(n), counts)
    cols = np.fromiter((j for c in lists for j in c), dtype=np.int64, count=int(counts.sum()))
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    sq = np.zeros(len(rows))
    for c in range(P.shape[1]):
        diff = P[rows, c] - P[cols, c]
        sq += diff * diff
    D = np.maximum(np.sqrt(sq), min_dist)

    order = np.lexsort((D, rows))
    rows, cols, D = rows[order], cols[order], D[order]
    start = np.searchsorted(rows, np.arange(n))
    kdist = D[start + k - 1]
    nb = D <= kdist[rows]
    rows, cols, D = rows[nb], cols[nb], D[nb]
    size = np.bincount(rows, minlength=n)
    lrd = size / np.bincount(rows, weights=np.maximum(kdist[cols], D), minlength=n)
    return np.bincount(rows, weights=lrd[cols], minlength=n) / size / lrd


# ---------------------------------------------------------------------------
# mask warping by optical flow
# ---------------------------------------------------------------------------


@njit
def warp_mask_numba(mask, flow):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=np.bool_)
    for v in range(h):
        for u in range(w):
            if not mask[v, u]:
                continue
            tu = math.floor(u + flow[v, u, 0] + 0.5)
            tv = math.floor(v + flow[v, u, 1] + 0.5)
            if 0 <= tu < w and 0 <= tv < h:
                out[int(tv), int(tu)] = True
    return out


def warp_mask_numpy(mask, flow):
    h, w = mask.shape
    out = np.zeros((h, w), dtype=bool)
    vs, us = np.nonzero(mask)
    tu = np.floor(us + flow[vs, us, 0] + 0.5).astype(np.int64)
    tv = np.floor(vs + flow[vs, us, 1] + 0.5).astype(np.int64)
    ok = (tu >= 0) & (tu < w) & (tv >= 0) & (tv < h)
    out[tv[ok], tu[ok]] = True
    return out


# ---------------------------------------------------------------------------
# ray / oriented-box intersection
# ---------------------------------------------------------------------------
# origin: (3,) world ray origin; dirs: (H, W, 3) world ray directions scaled so
# that the camera-frame z component is 1 (ray parameter == depth).
# centers (B, 3), rots (B, 3, 3) world-from-box, halves (B, 3).
# Returns hit_t (B, H, W): entry depth of each box, inf on miss.


@njit
def raycast_boxes_numba(origin, dirs, centers, rots, halves):
    B = centers.shape[0]
    H, W = dirs.shape[0], dirs.shape[1]
    hit_t = np.full((B, H, W), np.inf)
    for b in range(B):
        R = rots[b]
        ox = origin[0] - centers[b, 0]
        oy = origin[1] - centers[b, 1]
        oz = origin[2] - centers[b, 2]
        lo = np.empty(3)
        for a in range(3):
            lo[a] = R[0, a] * ox + R[1, a] * oy + R[2, a] * oz
        for v in range(H):
            for u in range(W):
                t0 = -np.inf
                t1 = np.inf
                miss = False
                for a in range(3):
                    ld = R[0, a] * dirs[v, u, 0] + R[1, a] * dirs[v, u, 1] + R[2, a] * dirs[v, u, 2]
                    if ld == 0.0:
                        if abs(lo[a]) > halves[b, a]:
                            miss = True
                            break
                        continue
                    ta = (-halves[b, a] - lo[a]) / ld
                    tb = (halves[b, a] - lo[a]) / ld
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
                if miss or t0 > t1 or t1 <= 0.0:
                    continue
                hit_t[b, v, u] = t0 if t0 > 0.0 else t1
    return hit_t


def raycast_boxes_numpy(origin, dirs, centers, rots, halves):
    B = centers.shape[0]
    H, W = dirs.shape[:2]
    hit_t = np.full((B, H, W), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        for b in range(B):
            R = rots[b]
            lo = R.T @ (origin - centers[b])
            ld = dirs @ R  # (H, W, 3): R^T d per pixel
            t0 = np.full((H, W), -np.inf)
            t1 = np.full((H, W), np.inf)
            miss = np.zeros((H, W), dtype=bool)
            for a in range(3):
                da = ld[:, :, a]
                par = da == 0.0
                miss |= par & (abs(lo[a]) > halves[b, a])
                ta = (-halves[b, a] - lo[a]) / da
                tb = (halves[b, a] - lo[a]) / da
                near = np.where(par, -np.inf, np.minimum(ta, tb))
                far = np.where(par, np.inf, np.maximum(ta, tb))
                t0 = np.maximum(t0, near)
                t1 = np.minimum(t1, far)
            ok = ~miss & (t0 <= t1) & (t1 > 0.0)
            hit_t[b] = np.where(ok, np.where(t0 > 0.0, t0, t1), np.inf)
    return hit_t


if USE_NUMBA:
    lof_kernel = lof_numba
    warp_mask_kernel = warp_mask_numba
    raycast_boxes_kernel = raycast_boxes_numba
else:
    lof_kernel = lof_numpy
    warp_mask_kernel = warp_mask_numpy
    raycast_boxes_kernel = raycast_boxes_numpy
