# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels.

Every floating-point expression here has a twin in ``_kernels_py.py`` with the
same operand order, so both backends produce bit-identical output.  Build with
floating-point contraction disabled (see setup.py).
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, sqrt, ceil, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64

# collision horizons tried in turn: tau, tau/2, tau/4, tau/8
cdef int HORIZON_LEVELS = 4
cdef int NBX[8]
cdef int NBY[8]
NBX[:] = [1, -1, 0, 0, 1, -1, 1, -1]
NBY[:] = [0, 0, 1, -1, 1, 1, -1, -1]


# -- binary heap keyed by (dist, index) -------------------------------------

cdef inline bint _less(f64 da, i64 ia, f64 db, i64 ib) nogil:
    return da < db or (da == db and ia < ib)


cdef struct Heap:
    f64 *d
    i64 *i
    Py_ssize_t n
    Py_ssize_t cap


cdef int _heap_push(Heap *h, f64 d, i64 i) nogil:
    cdef Py_ssize_t k, p
    cdef f64 *nd
    cdef i64 *ni
    if h.n == h.cap:
        nd = <f64 *> malloc(2 * h.cap * sizeof(f64))
        ni = <i64 *> malloc(2 * h.cap * sizeof(i64))
        if nd == NULL or ni == NULL:
            return -1
        for k in range(h.n):
            nd[k] = h.d[k]
            ni[k] = h.i[k]
        free(h.d)
        free(h.i)
        h.d = nd
        h.i = ni
        h.cap = 2 * h.cap
    k = h.n
    h.n += 1
    while k > 0:
        p = (k - 1) >> 1
        if _less(d, i, h.d[p], h.i[p]):
            h.d[k] = h.d[p]
            h.i[k] = h.i[p]
            k = p
        else:
            break
    h.d[k] = d
    h.i[k] = i
    return 0


cdef void _heap_pop(Heap *h, f64 *d, i64 *i) nogil:
    cdef Py_ssize_t k = 0, c
    cdef f64 ld
    cdef i64 li
    d[0] = h.d[0]
    i[0] = h.i[0]
    h.n -= 1
    if h.n == 0:
        return
    ld = h.d[h.n]
    li = h.i[h.n]
    while True:
        c = 2 * k + 1
        if c >= h.n:
            break
        if c + 1 < h.n and _less(h.d[c + 1], h.i[c + 1], h.d[c], h.i[c]):
            c += 1
        if _less(h.d[c], h.i[c], ld, li):
            h.d[k] = h.d[c]
            h.i[k] = h.i[c]
            k = c
        else:
            break
    h.d[k] = ld
    h.i[k] = li


def dijkstra(const unsigned char[::1] passable, const f64[::1] slowness, i64 nx, i64 ny,
             f64 l1, f64 l2, const i64[::1] targets):
    cdef i64 n = nx * ny
    out = np.full(n, np.inf, dtype=np.float64)
    cdef f64[::1] dist = out
    cdef Heap h
    cdef Py_ssize_t t
    cdef i64 u, v, ux, uy, vx, vy, k
    cdef f64 d, nd, step, su
    h.cap = 1024
    h.n = 0
    h.d = <f64 *> malloc(h.cap * sizeof(f64))
    h.i = <i64 *> malloc(h.cap * sizeof(i64))
    if h.d == NULL or h.i == NULL:
        raise MemoryError()
    try:
        with nogil:
            for t in range(targets.shape[0]):
                u = targets[t]
                if passable[u] and dist[u] != 0.0:
                    dist[u] = 0.0
                    if _heap_push(&h, 0.0, u) != 0:
                        with gil:
                            raise MemoryError()
            while h.n > 0:
                _heap_pop(&h, &d, &u)
                if d > dist[u]:
                    continue
                ux = u % nx
                uy = u // nx
                su = slowness[u]
                for k in range(8):
                    vx = ux + NBX[k]
                    vy = uy + NBY[k]
                    if vx < 0 or vy < 0 or vx >= nx or vy >= ny:
                        continue
                    v = vy * nx + vx
                    if not passable[v]:
                        continue
                    if k >= 4:
                        if not passable[uy * nx + vx] or not passable[vy * nx + ux]:
                            continue
                        step = l2
                    else:
                        step = l1
                    nd = d + step * (0.5 * (su + slowness[v]))
                    if nd < dist[v]:
                        dist[v] = nd
                        if _heap_push(&h, nd, v) != 0:
                            with gil:
                                raise MemoryError()
    finally:
        free(h.d)
        free(h.i)
    return out


# -- geometry helpers --------------------------------------------------------

cdef inline bint _proper_cross(f64 ax, f64 ay, f64 bx, f64 by, f64 px, f64 py, f64 qx, f64 qy) nogil:
    cdef f64 d1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    cdef f64 d2 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    cdef f64 d3 = (qx - px) * (ay - py) - (qy - py) * (ax - px)
    cdef f64 d4 = (qx - px) * (by - py) - (qy - py) * (bx - px)
    return (((d1 > 0) and (d2 < 0)) or ((d1 < 0) and (d2 > 0))) and \
           (((d3 > 0) and (d4 < 0)) or ((d3 < 0) and (d4 > 0)))


cdef inline void _wall_range(f64 px, f64 py, f64 wx0, f64 wy0, f64 wcell, i64 wnx, i64 wny,
                             const i64[::1] wstarts, i64 *lo, i64 *hi) nogil:
    cdef i64 i = <i64> floor((px - wx0) / wcell)
    cdef i64 j = <i64> floor((py - wy0) / wcell)
    cdef i64 c
    if i >= 0 and j >= 0 and i < wnx and j < wny:
        c = j * wnx + i
        lo[0] = wstarts[c]
        hi[0] = wstarts[c + 1]
    else:
        lo[0] = 0
        hi[0] = 0


cdef inline f64 _min_image(f64 dx, f64 period) nogil:
    if period > 0:
        return dx - period * floor(dx / period + 0.5)
    return dx


# -- spatial hash -------------------------------------------------------------

def bucket_order(const i64[::1] key, i64 ncells):
    """Stable counting sort of slots by cell: (order, starts)."""
    cdef Py_ssize_t n = key.shape[0], i
    cdef i64 c
    starts_arr = np.zeros(ncells + 1, dtype=np.int64)
    order_arr = np.empty(n, dtype=np.int64)
    fill_arr = np.empty(ncells, dtype=np.int64)
    cdef i64[::1] starts = starts_arr
    cdef i64[::1] order = order_arr
    cdef i64[::1] fill = fill_arr
    with nogil:
        for i in range(n):
            starts[key[i] + 1] += 1
        for c in range(ncells):
            starts[c + 1] += starts[c]
            fill[c] = starts[c]
        for i in range(n):
            c = key[i]
            order[fill[c]] = i
            fill[c] += 1
    return order_arr, starts_arr


# -- descent direction --------------------------------------------------------

def descend(const f64[::1] dist, i64 nx, i64 ny, f64 x0, f64 y0, f64 cell, pos_in,
            const f64[:, ::1] segs, f64 wx0, f64 wy0, f64 wcell, i64 wnx, i64 wny,
            const i64[::1] wstarts, const i64[::1] witems):
    pos_arr = np.ascontiguousarray(np.asarray(pos_in, dtype=np.float64).reshape(-1, 2))
    cdef const f64[:, ::1] pos = pos_arr
    cdef Py_ssize_t m = pos.shape[0]
    dirs_arr = np.zeros((m, 2), dtype=np.float64)
    status_arr = np.full(m, 2, dtype=np.int8)
    cdef f64[:, ::1] dirs = dirs_arr
    cdef cnp.int8_t[::1] status = status_arr
    cdef Py_ssize_t a, c, r, s, best
    cdef i64 ix, iy, cx, cy, lo, hi, w
    cdef f64 px, py, d, cxx, cyy, ex, ey, e
    cdef f64 cost[25]
    cdef f64 exs[25]
    cdef f64 eys[25]
    cdef f64 es[25]
    cdef int order[25]
    cdef int nval, tmp, q
    cdef bint blocked
    with nogil:
        for a in range(m):
            px = pos[a, 0]
            py = pos[a, 1]
            ix = <i64> floor((px - x0) / cell)
            iy = <i64> floor((py - y0) / cell)
            if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
                continue
            if dist[iy * nx + ix] == 0.0:
                status[a] = 1
                continue
            _wall_range(px, py, wx0, wy0, wcell, wnx, wny, wstarts, &lo, &hi)
            nval = 0
            best = -1
            c = 0
            for r in range(-2, 3):
                for s in range(-2, 3):
                    cx = ix + s
                    cy = iy + r
                    cost[c] = INFINITY
                    if cx >= 0 and cy >= 0 and cx < nx and cy < ny:
                        d = dist[cy * nx + cx]
                        cxx = x0 + (<f64> cx + 0.5) * cell
                        cyy = y0 + (<f64> cy + 0.5) * cell
                        ex = cxx - px
                        ey = cyy - py
                        e = sqrt(ex * ex + ey * ey)
                        exs[c] = ex
                        eys[c] = ey
                        es[c] = e
                        if d != INFINITY and e > 0.0:
                            cost[c] = d + e
                            if lo == hi:
                                # no walls nearby: the first cheapest candidate wins
                                if best < 0 or cost[c] < cost[best]:
                                    best = c
                            else:
                                # stable insertion by (cost, scan index)
                                q = nval
                                while q > 0 and cost[order[q - 1]] > cost[c]:
                                    order[q] = order[q - 1]
                                    q -= 1
                                order[q] = <int> c
                                nval += 1
                    c += 1
            for q in range(nval):
                c = order[q]
                blocked = False
                for w in range(lo, hi):
                    s = witems[w]
                    if _proper_cross(segs[s, 0], segs[s, 1], segs[s, 2], segs[s, 3],
                                     px, py, px + exs[c], py + eys[c]):
                        blocked = True
                        break
                if not blocked:
                    best = c
                    break
            if best >= 0:
                dirs[a, 0] = exs[best] / es[best]
                dirs[a, 1] = eys[best] / es[best]
                status[a] = 0
    return dirs_arr, status_arr


# -- velocity selection ------------------------------------------------------

def avoid(pos_in, vel_in, rad_in, des_in, const unsigned char[::1] mask, const unsigned char[::1] active,
          const i64[::1] order, const i64[::1] starts, f64 hx0, f64 hy0, f64 hcw, f64 hch, i64 hnx, i64 hny,
          f64 period, f64 perception, f64 tau, f64 dt,
          const f64[::1] cc, const f64[::1] cs, const f64[::1] cf,
          const f64[:, ::1] segs, f64 wx0, f64 wy0, f64 wcell, i64 wnx, i64 wny,
          const i64[::1] wstarts, const i64[::1] witems):
    cdef const f64[:, ::1] pos = np.ascontiguousarray(pos_in, dtype=np.float64)
    cdef const f64[:, ::1] vel = np.ascontiguousarray(vel_in, dtype=np.float64)
    cdef const f64[::1] rad = np.ascontiguousarray(rad_in, dtype=np.float64)
    cdef const f64[:, ::1] des = np.ascontiguousarray(des_in, dtype=np.float64)
    cdef Py_ssize_t n = pos.shape[0]
    out_arr = np.zeros((n, 2), dtype=np.float64)
    cdef f64[:, ::1] out = out_arr
    cdef Py_ssize_t ncand = cc.shape[0]
    cdef Py_ssize_t i, i0, k, t, nn, cap
    cdef i64 ix, iy, jx, jy, jx0, jx1, jy0, jy1, rx, ry, col, cidx, p, j, lo, hi, w, sidx
    cdef f64 dx, dy, s, ux, uy, vx, vy, sp, px, py, qx, qy, ri
    cdef f64 wx, wy, ww, R, uxr, uyr, wu, uu, tt, ex, ey, ax, ay, bx, by, sx, sy, ll, pr2
    cdef bint bad, wrapall, found
    cdef f64 tl
    cdef int level
    cdef i64 *nb
    cdef f64 *nwx
    cdef f64 *nwy
    cdef f64 *nrr
    cdef f64 *nww
    if n == 0:
        return out_arr
    cap = n
    nb = <i64 *> malloc(cap * sizeof(i64))
    nwx = <f64 *> malloc(cap * sizeof(f64))
    nwy = <f64 *> malloc(cap * sizeof(f64))
    nrr = <f64 *> malloc(cap * sizeof(f64))
    nww = <f64 *> malloc(cap * sizeof(f64))
    if nb == NULL or nwx == NULL or nwy == NULL or nrr == NULL or nww == NULL:
        free(nb); free(nwx); free(nwy); free(nrr); free(nww)
        raise MemoryError()
    pr2 = perception * perception
    rx = <i64> ceil(perception / hcw)
    ry = <i64> ceil(perception / hch)
    wrapall = period > 0 and 2 * rx + 1 >= hnx
    try:
        with nogil:
            # every agent reads only the previous velocities, so visiting them
            # in hash order gives the same result with better memory locality
            for i0 in range(n):
                i = order[i0]
                if mask[i] == 0 or active[i] == 0:
                    continue
                dx = des[i, 0]
                dy = des[i, 1]
                s = sqrt(dx * dx + dy * dy)
                if not (s > 0.0):
                    continue
                ux = dx / s
                uy = dy / s
                px = pos[i, 0]
                py = pos[i, 1]
                ri = rad[i]
                # gather neighbours
                nn = 0
                ix = <i64> floor((px - hx0) / hcw)
                iy = <i64> floor((py - hy0) / hch)
                if ix < 0:
                    ix = 0
                if ix > hnx - 1:
                    ix = hnx - 1
                if iy < 0:
                    iy = 0
                if iy > hny - 1:
                    iy = hny - 1
                jy0 = iy - ry if iy - ry > 0 else 0
                jy1 = iy + ry if iy + ry < hny - 1 else hny - 1
                if period > 0:
                    if wrapall:
                        jx0 = 0
                        jx1 = hnx - 1
                    else:
                        jx0 = ix - rx
                        jx1 = ix + rx
                else:
                    jx0 = ix - rx if ix - rx > 0 else 0
                    jx1 = ix + rx if ix + rx < hnx - 1 else hnx - 1
                for jy in range(jy0, jy1 + 1):
                    for jx in range(jx0, jx1 + 1):
                        col = jx
                        if period > 0 and not wrapall:
                            col = jx % hnx
                            if col < 0:
                                col += hnx
                        cidx = jy * hnx + col
                        for p in range(starts[cidx], starts[cidx + 1]):
                            j = order[p]
                            if j == i or active[j] == 0:
                                continue
                            wx = _min_image(pos[j, 0] - px, period)
                            wy = pos[j, 1] - py
                            ww = wx * wx + wy * wy
                            if ww <= pr2:
                                R = ri + rad[j]
                                nb[nn] = j
                                nwx[nn] = wx
                                nwy[nn] = wy
                                nrr[nn] = R * R
                                nww[nn] = ww
                                nn += 1
                _wall_range(px, py, wx0, wy0, wcell, wnx, wny, wstarts, &lo, &hi)
                found = False
                tl = tau
                for level in range(HORIZON_LEVELS):
                    for k in range(ncand):
                        if k == 0:
                            vx = dx
                            vy = dy
                        else:
                            sp = cf[k] * s
                            vx = sp * (cc[k] * ux - cs[k] * uy)
                            vy = sp * (cs[k] * ux + cc[k] * uy)
                        bad = False
                        for t in range(nn):
                            j = nb[t]
                            uxr = vx - vel[j, 0]
                            uyr = vy - vel[j, 1]
                            wu = nwx[t] * uxr + nwy[t] * uyr
                            uu = uxr * uxr + uyr * uyr
                            if nww[t] < nrr[t]:
                                if wu > 0.0:
                                    bad = True
                                    break
                            elif uu != 0.0:
                                tt = wu / uu
                                if tt > tl:
                                    tt = tl
                                if tt > 0.0:
                                    ex = nwx[t] - uxr * tt
                                    ey = nwy[t] - uyr * tt
                                    if ex * ex + ey * ey < nrr[t]:
                                        bad = True
                                        break
                        if not bad:
                            qx = px + vx * dt
                            qy = py + vy * dt
                            for w in range(lo, hi):
                                sidx = witems[w]
                                ax = segs[sidx, 0]
                                ay = segs[sidx, 1]
                                bx = segs[sidx, 2]
                                by = segs[sidx, 3]
                                sx = bx - ax
                                sy = by - ay
                                ll = sx * sx + sy * sy
                                if ll == 0.0:
                                    tt = 0.0
                                else:
                                    tt = ((qx - ax) * sx + (qy - ay) * sy) / ll
                                if tt < 0.0:
                                    tt = 0.0
                                if tt > 1.0:
                                    tt = 1.0
                                ex = qx - (ax + tt * sx)
                                ey = qy - (ay + tt * sy)
                                if ex * ex + ey * ey < ri * ri or _proper_cross(ax, ay, bx, by, px, py, qx, qy):
                                    bad = True
                                    break
                        if not bad:
                            out[i, 0] = vx
                            out[i, 1] = vy
                            found = True
                            break
                    if found:
                        break
                    tl = tl * 0.5
    finally:
        free(nb); free(nwx); free(nwy); free(nrr); free(nww)
    return out_arr


# -- sequential commit -------------------------------------------------------

def commit(pos_in, prop_in, rad_in, const unsigned char[::1] active, const i64[::1] order, const i64[::1] starts,
           f64 hx0, f64 hy0, f64 hcw, f64 hch, i64 hnx, i64 hny, f64 period, f64 dt):
    """Accept each proposal in slot order unless it overlaps another agent's
    current position (committed for lower slots, old for higher slots)."""
    cdef const f64[:, ::1] pos = np.ascontiguousarray(pos_in, dtype=np.float64)
    cdef const f64[:, ::1] prop = np.ascontiguousarray(prop_in, dtype=np.float64)
    cdef const f64[::1] rad = np.ascontiguousarray(rad_in, dtype=np.float64)
    cdef Py_ssize_t n = pos.shape[0]
    new_arr = np.array(pos, dtype=np.float64, copy=True).reshape(-1, 2)
    moved_arr = np.zeros(n, dtype=np.uint8)
    cdef f64[:, ::1] new = new_arr
    cdef unsigned char[::1] moved = moved_arr
    cdef Py_ssize_t i
    cdef i64 ix, iy, jx, jy, jx0, jx1, jy0, jy1, rx, ry, col, cidx, p, j
    cdef f64 rmax = 0.0, step = 0.0, v2, x, y, cx, cy, ddx, ddy, R, reach
    cdef bint ok, wrapall
    if n == 0:
        return new_arr, moved_arr
    for i in range(n):
        if active[i]:
            if rad[i] > rmax:
                rmax = rad[i]
            v2 = prop[i, 0] * prop[i, 0] + prop[i, 1] * prop[i, 1]
            if v2 > step:
                step = v2
    step = sqrt(step) * dt
    with nogil:
        for i in range(n):
            if active[i] == 0 or (prop[i, 0] == 0.0 and prop[i, 1] == 0.0):
                continue
            x = pos[i, 0] + prop[i, 0] * dt
            y = pos[i, 1] + prop[i, 1] * dt
            reach = rad[i] + rmax + step + 1e-9
            rx = <i64> ceil(reach / hcw)
            ry = <i64> ceil(reach / hch)
            wrapall = period > 0 and 2 * rx + 1 >= hnx
            ix = <i64> floor((x - hx0) / hcw)
            iy = <i64> floor((y - hy0) / hch)
            if ix < 0:
                ix = 0
            if ix > hnx - 1:
                ix = hnx - 1
            if iy < 0:
                iy = 0
            if iy > hny - 1:
                iy = hny - 1
            jy0 = iy - ry if iy - ry > 0 else 0
            jy1 = iy + ry if iy + ry < hny - 1 else hny - 1
            if period > 0:
                if wrapall:
                    jx0 = 0
                    jx1 = hnx - 1
                else:
                    jx0 = ix - rx
                    jx1 = ix + rx
            else:
                jx0 = ix - rx if ix - rx > 0 else 0
                jx1 = ix + rx if ix + rx < hnx - 1 else hnx - 1
            ok = True
            for jy in range(jy0, jy1 + 1):
                for jx in range(jx0, jx1 + 1):
                    col = jx
                    if period > 0 and not wrapall:
                        col = jx % hnx
                        if col < 0:
                            col += hnx
                    cidx = jy * hnx + col
                    for p in range(starts[cidx], starts[cidx + 1]):
                        j = order[p]
                        if j == i or active[j] == 0:
                            continue
                        if j < i:
                            cx = new[j, 0]
                            cy = new[j, 1]
                        else:
                            cx = pos[j, 0]
                            cy = pos[j, 1]
                        ddx = _min_image(cx - x, period)
                        ddy = cy - y
                        R = rad[i] + rad[j]
                        if ddx * ddx + ddy * ddy < R * R:
                            ok = False
                            break
                    if not ok:
                        break
                if not ok:
                    break
            if ok:
                new[i, 0] = x
                new[i, 1] = y
                moved[i] = 1
    return new_arr, moved_arr
