"""Numba kernels for single-source distance propagation on a stencil mesh."""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_FAR, _TRIAL, _DONE = 0, 1, 2


@njit(cache=True, nogil=True, inline="always")
def _less(d, a, b):
    # heap order: distance, then vertex index
    return d[a] < d[b] or (d[a] == d[b] and a < b)


@njit(cache=True, nogil=True)
def _sift_up(heap, pos, d, k):
    v = heap[k]
    while k > 0:
        p = (k - 1) >> 1
        u = heap[p]
        if _less(d, v, u):
            heap[k] = u
            pos[u] = k
            k = p
        else:
            break
    heap[k] = v
    pos[v] = k


@njit(cache=True, nogil=True)
def _sift_down(heap, pos, d, k, size):
    v = heap[k]
    while True:
        c = 2 * k + 1
        if c >= size:
            break
        if c + 1 < size and _less(d, heap[c + 1], heap[c]):
            c += 1
        u = heap[c]
        if _less(d, u, v):
            heap[k] = u
            pos[u] = k
            k = c
        else:
            break
    heap[k] = v
    pos[v] = k


@njit(cache=True, nogil=True)
def _simplex(ua, ub, ax, ay, bx, by, g00, g01, g11):
    """Interior minimum over s in (0,1) of (1-s) ua + s ub + |e_a + s (e_b - e_a)|_g.

    Returns (value, s), or (inf, -1) when the minimum sits at an endpoint;
    endpoints are covered by the edge relaxations.
    """
    dx, dy = bx - ax, by - ay
    gd0, gd1 = g00 * dx + g01 * dy, g01 * dx + g11 * dy
    A = dx * gd0 + dy * gd1
    du = ub - ua
    if A <= 0.0 or du * du >= A:
        return np.inf, -1.0
    B = ax * gd0 + ay * gd1
    C = ax * (g00 * ax + g01 * ay) + ay * (g01 * ax + g11 * ay)
    disc = (A * C - B * B) / (A - du * du)
    if disc <= 0.0:
        return np.inf, -1.0
    s = (-B - du * math.sqrt(disc)) / A
    if not 0.0 < s < 1.0:
        return np.inf, -1.0
    q = C + 2.0 * B * s + A * s * s
    return ua + s * du + math.sqrt(max(q, 0.0)), s


@njit(cache=True, nogil=True)
def propagate(indptr, nbr, length, rev, fan_ok, xy, metric3, source, upwind, dist, parent):
    """Dijkstra-ordered front propagation from ``source``.

    With ``upwind`` false this is exact Dijkstra on the edge graph (ties broken
    by smallest vertex index, both in the queue and for the parent). With
    ``upwind`` true each newly accepted vertex additionally offers, to every
    unaccepted neighbour x, the semi-Lagrangian update through the two stencil
    triangles of x that contain it. Edge relaxations are always performed, so
    ``dist[j] <= dist[i] + length(i, j)`` holds exactly in both modes.
    """
    n = indptr.shape[0] - 1
    state = np.zeros(n, dtype=np.int8)
    heap = np.empty(n, dtype=np.int64)
    pos = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        dist[i] = np.inf
        parent[i] = -1
    dist[source] = 0.0
    heap[0] = source
    pos[source] = 0
    size = 1
    state[source] = _TRIAL
    while size > 0:
        a = heap[0]
        size -= 1
        if size > 0:
            heap[0] = heap[size]
            pos[heap[0]] = 0
            _sift_down(heap, pos, dist, 0, size)
        state[a] = _DONE
        pos[a] = -1
        da = dist[a]
        for k in range(indptr[a], indptr[a + 1]):
            x = nbr[k]
            if state[x] == _DONE:
                continue
            cand = da + length[k]
            par = a
            if upwind:
                start = indptr[x]
                deg = indptr[x + 1] - start
                kx = rev[k]
                local = kx - start
                g00 = metric3[x, 0]
                g01 = metric3[x, 1]
                g11 = metric3[x, 2]
                ax = xy[a, 0] - xy[x, 0]
                ay = xy[a, 1] - xy[x, 1]
                for side in range(2):
                    if side == 0:
                        ok = fan_ok[kx]
                        kb = start + (local + 1) % deg
                    else:
                        kb = start + (local - 1 + deg) % deg
                        ok = fan_ok[kb]
                    if not ok:
                        continue
                    b = nbr[kb]
                    if state[b] != _DONE:
                        continue
                    m00 = 0.5 * g00 + 0.25 * (metric3[a, 0] + metric3[b, 0])
                    m01 = 0.5 * g01 + 0.25 * (metric3[a, 1] + metric3[b, 1])
                    m11 = 0.5 * g11 + 0.25 * (metric3[a, 2] + metric3[b, 2])
                    val, s = _simplex(da, dist[b], ax, ay, xy[b, 0] - xy[x, 0], xy[b, 1] - xy[x, 1],
                                      m00, m01, m11)
                    if val < cand:
                        cand = val
                        par = a if s <= 0.5 else b
            if cand < dist[x] or (cand == dist[x] and par < parent[x]):
                dist[x] = cand
                parent[x] = par
                if state[x] == _FAR:
                    state[x] = _TRIAL
                    heap[size] = x
                    pos[x] = size
                    size += 1
                    _sift_up(heap, pos, dist, size - 1)
                else:
                    _sift_up(heap, pos, dist, pos[x])


@njit(cache=True, nogil=True)
def propagate_many(indptr, nbr, length, rev, fan_ok, xy, metric3, sources, upwind, dist, parent):
    for r in range(sources.shape[0]):
        propagate(indptr, nbr, length, rev, fan_ok, xy, metric3, sources[r], upwind, dist[r], parent[r])


@njit(cache=True, nogil=True)
def _osc_bounded(q, d, order, bound):
    # oscillation of q - d over samples in ``order``, abandoned once it exceeds bound
    lo = np.inf
    hi = -np.inf
    for t in range(order.shape[0]):
        j = order[t]
        v = q[j] - d[j]
        if v < lo:
            lo = v
        if v > hi:
            hi = v
        if hi - lo > bound:
            return hi - lo
    return hi - lo


@njit(cache=True, nogil=True)
def _key_range(skey, target, bound):
    # [lo, hi) of sorted keys within bound of target
    lo = np.searchsorted(skey, target - bound, side="left")
    hi = np.searchsorted(skey, target + bound, side="right")
    return lo, hi


@njit(cache=True, nogil=True)
def _best_key(skeys, qkeys, bound):
    kbest = 0
    lo_b = 0
    hi_b = skeys.shape[1]
    for k in range(skeys.shape[0]):
        lo, hi = _key_range(skeys[k], qkeys[k], bound)
        if hi - lo < hi_b - lo_b:
            kbest = k
            lo_b = lo
            hi_b = hi
    return kbest, lo_b, hi_b


@njit(cache=True, nogil=True)
def sup_nearest(Q, D, order, keys_i, keys_j, skeys, sidx, n_seed, positions, exclude_radius, slack):
    """Exact sup-oscillation nearest neighbour of every row of Q among rows of D.

    Any two columns (i, j) bound the oscillation of q - d from below by
    |(q_i - q_j) - (d_i - d_j)|. ``skeys[k]`` holds that key of every row of D
    for the column pair (keys_i[k], keys_j[k]), sorted, with ``sidx[k]`` the
    row order. After a seed bound from the ``n_seed`` rows nearest in the
    first key, only the key range (widened by ``slack`` for rounding) of the
    most selective key can hold a better row, and it is scanned with early
    abandoning along ``order``. Ties go to the smallest row index. With
    exclude_radius > 0 the runner-up outside that radius (in ``positions``)
    of the winner is found the same way, else it is inf.
    """
    nq = Q.shape[0]
    nd = D.shape[0]
    nk = keys_i.shape[0]
    best = np.empty(nq, dtype=np.int64)
    best_d = np.empty(nq)
    second = np.full(nq, np.inf)
    qkeys = np.empty(nk)
    r2 = exclude_radius * exclude_radius
    for r in range(nq):
        q = Q[r]
        for k in range(nk):
            qkeys[k] = q[keys_i[k]] - q[keys_j[k]]
        # seed from the nearest rows in the first key
        pos = np.searchsorted(skeys[0], qkeys[0])
        lo = max(0, pos - n_seed // 2)
        hi = min(nd, lo + n_seed)
        lo = max(0, hi - n_seed)
        b = sidx[0, lo]
        bd = np.inf
        for t in range(lo, hi):
            i = sidx[0, t]
            v = _osc_bounded(q, D[i], order, bd)
            if v < bd or (v == bd and i < b):
                b = i
                bd = v
        k, lo, hi = _best_key(skeys, qkeys, bd + slack)
        for t in range(lo, hi):
            i = sidx[k, t]
            v = _osc_bounded(q, D[i], order, bd)
            if v < bd or (v == bd and i < b):
                b = i
                bd = v
        best[r] = b
        best_d[r] = bd
        if exclude_radius > 0.0:
            px = positions[b, 0]
            py = positions[b, 1]
            # seed: the nearest key-0 rows outside the radius
            sd = np.inf
            pos = np.searchsorted(skeys[0], qkeys[0])
            found = 0
            step = 0
            while found < n_seed and step < nd:
                for t in (pos + step, pos - step - 1):
                    if t < 0 or t >= nd:
                        continue
                    i = sidx[0, t]
                    dx = positions[i, 0] - px
                    dy = positions[i, 1] - py
                    if dx * dx + dy * dy <= r2:
                        continue
                    found += 1
                    v = _osc_bounded(q, D[i], order, sd)
                    if v < sd:
                        sd = v
                step += 1
            if sd < np.inf:
                k, lo, hi = _best_key(skeys, qkeys, sd + slack)
                for t in range(lo, hi):
                    i = sidx[k, t]
                    dx = positions[i, 0] - px
                    dy = positions[i, 1] - py
                    if dx * dx + dy * dy <= r2:
                        continue
                    v = _osc_bounded(q, D[i], order, sd)
                    if v < sd:
                        sd = v
            second[r] = sd
    return best, best_d, second
