"""Numba kernels for the hot loops (greedy NMS, SGM cost and aggregation).

All kernels are deterministic regardless of thread count: parallel loops
only ever write disjoint slices, and every accumulation runs in a fixed
order within its own slice.
"""
import numpy as np
from numba import njit, prange


@njit(cache=True)
def greedy_nms(xs, ys, radius, max_keep):
    """Suppress points within `radius` of an already-kept point.

    Points must be given in priority order (highest response first).
    Returns a boolean keep-mask; at most max_keep entries are set.
    """
    n = xs.shape[0]
    keep = np.zeros(n, dtype=np.bool_)
    kept_x = np.empty(n, dtype=np.float64)
    kept_y = np.empty(n, dtype=np.float64)
    r2 = radius * radius
    k = 0
    for i in range(n):
        if k >= max_keep:
            break
        ok = True
        for j in range(k):
            dx = xs[i] - kept_x[j]
            dy = ys[i] - kept_y[j]
            if dx * dx + dy * dy <= r2:
                ok = False
                break
        if ok:
            kept_x[k] = xs[i]
            kept_y[k] = ys[i]
            k += 1
            keep[i] = True
    return keep


@njit(parallel=True, cache=True)
def sad_cost_volume(gl_pad, gr_pad, win, d_min, d_count, sign, sentinel, out):
    """Window sum of absolute gradient differences, one slice per disparity.

    gl_pad/gr_pad are edge-padded by `win` on all sides. For disparity d the
    right image is sampled at column x + sign*d (clamped into the padded
    array, which extends the edge replication). Pixels whose *center* right
    sample falls outside the unpadded image get the sentinel cost.
    """
    hp, wp = gl_pad.shape
    h = hp - 2 * win
    w = wp - 2 * win
    size = 2 * win + 1
    for di in prange(d_count):
        d = d_min + di
        shift = sign * d
        tmp = np.empty((hp, w), dtype=np.float32)
        for y in range(hp):
            s = np.float32(0.0)
            for u in range(size):
                uc = u + shift
                if uc < 0:
                    uc = 0
                elif uc >= wp:
                    uc = wp - 1
                s += abs(gl_pad[y, u] - gr_pad[y, uc])
            tmp[y, 0] = s
            for x in range(1, w):
                u_add = x + size - 1
                uc = u_add + shift
                if uc < 0:
                    uc = 0
                elif uc >= wp:
                    uc = wp - 1
                s += abs(gl_pad[y, u_add] - gr_pad[y, uc])
                u_sub = x - 1
                uc = u_sub + shift
                if uc < 0:
                    uc = 0
                elif uc >= wp:
                    uc = wp - 1
                s -= abs(gl_pad[y, u_sub] - gr_pad[y, uc])
                tmp[y, x] = s
        for x in range(w):
            oob = (x + shift) < 0 or (x + shift) >= w
            s = np.float32(0.0)
            for v in range(size):
                s += tmp[v, x]
            out[0, x, di] = sentinel if oob else s
            for y in range(1, h):
                s += tmp[y + size - 1, x] - tmp[y - 1, x]
                out[y, x, di] = sentinel if oob else s


@njit(parallel=True, cache=True)
def sgm_aggregate_dir(cost, agg, dx, dy, p1, p2):
    """Accumulate one direction's path costs into agg (in place).

    Recursion along each path: L(p,d) = C(p,d) - min_i L(p-r,i)
    + min{ L(p-r,d); L(p-r,d-1)+P1; L(p-r,d+1)+P1; min_i L(p-r,i)+P2 }.
    The first pixel of each path takes L = C. Paths of one direction are
    pixel-disjoint, so the parallel loop over paths is race-free.
    """
    h, w, nd = cost.shape
    # enumerate path start pixels: those whose predecessor is off-image
    max_starts = h * w
    sx = np.empty(max_starts, dtype=np.int64)
    sy = np.empty(max_starts, dtype=np.int64)
    ns = 0
    for y in range(h):
        for x in range(w):
            px = x - dx
            py = y - dy
            if px < 0 or px >= w or py < 0 or py >= h:
                sx[ns] = x
                sy[ns] = y
                ns += 1
    for s in prange(ns):
        x = sx[s]
        y = sy[s]
        l_prev = np.empty(nd, dtype=np.float32)
        l_cur = np.empty(nd, dtype=np.float32)
        min_prev = np.float32(np.inf)
        for d in range(nd):
            v = cost[y, x, d]
            l_prev[d] = v
            agg[y, x, d] += v
            if v < min_prev:
                min_prev = v
        x += dx
        y += dy
        while 0 <= x < w and 0 <= y < h:
            min_cur = np.float32(np.inf)
            for d in range(nd):
                best = l_prev[d]
                if d > 0 and l_prev[d - 1] + p1 < best:
                    best = l_prev[d - 1] + p1
                if d < nd - 1 and l_prev[d + 1] + p1 < best:
                    best = l_prev[d + 1] + p1
                if min_prev + p2 < best:
                    best = min_prev + p2
                v = cost[y, x, d] + best - min_prev
                l_cur[d] = v
                agg[y, x, d] += v
                if v < min_cur:
                    min_cur = v
            for d in range(nd):
                l_prev[d] = l_cur[d]
            min_prev = min_cur
            x += dx
            y += dy
