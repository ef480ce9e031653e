"""Pure Python / NumPy implementation of the hot kernels.

Arithmetic mirrors ``_kernels.pyx`` operation for operation so that both
backends return bit-identical results; keep the two in sync.
"""
from __future__ import annotations

import heapq
import math

import numpy as np

INF = math.inf
HORIZON_LEVELS = 4  # collision horizons tried in turn: tau, tau/2, tau/4, tau/8

# neighbour order: E W N S NE NW SE SW
_NB = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, 1), (1, -1), (-1, -1))


def dijkstra(passable, slowness, nx, ny, l1, l2, targets):
    n = nx * ny
    dist = [INF] * n
    pas = passable.tolist()
    slow = slowness.tolist()
    heap = []
    for t in targets.tolist():
        if pas[t] and dist[t] != 0.0:
            dist[t] = 0.0
            heap.append((0.0, t))
    heapq.heapify(heap)
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        ux, uy = u % nx, u // nx
        su = slow[u]
        for k, (dx, dy) in enumerate(_NB):
            vx, vy = ux + dx, uy + dy
            if vx < 0 or vy < 0 or vx >= nx or vy >= ny:
                continue
            v = vy * nx + vx
            if not pas[v]:
                continue
            if k >= 4:
                if not pas[uy * nx + vx] or not pas[vy * nx + ux]:
                    continue
                step = l2
            else:
                step = l1
            nd = d + step * (0.5 * (su + slow[v]))
            if nd < dist[v]:
                dist[v] = nd
                heapq.heappush(heap, (nd, v))
    return np.asarray(dist, dtype=np.float64)


def _wall_lists(px, py, wx0, wy0, wcell, wnx, wny, wstarts, witems):
    """Per-point wall cell bounds (lo, hi) into ``witems``."""
    i = np.floor((px - wx0) / wcell).astype(np.int64)
    j = np.floor((py - wy0) / wcell).astype(np.int64)
    ok = (i >= 0) & (j >= 0) & (i < wnx) & (j < wny)
    c = np.where(ok, j * wnx + i, 0)
    lo = np.where(ok, wstarts[c], 0)
    hi = np.where(ok, wstarts[c + 1], 0)
    return lo, hi


def _expand(lo, hi):
    """For ranges [lo, hi) return (owner index, flat position) pairs."""
    cnt = hi - lo
    total = int(cnt.sum())
    owner = np.repeat(np.arange(len(lo)), cnt)
    if total == 0:
        return owner, owner
    base = np.repeat(lo - (np.cumsum(cnt) - cnt), cnt)
    return owner, base + np.arange(total)


def _proper_cross(ax, ay, bx, by, px, py, qx, qy):
    d1 = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
    d2 = (bx - ax) * (qy - ay) - (by - ay) * (qx - ax)
    d3 = (qx - px) * (ay - py) - (qy - py) * (ax - px)
    d4 = (qx - px) * (by - py) - (qy - py) * (bx - px)
    return (((d1 > 0) & (d2 < 0)) | ((d1 < 0) & (d2 > 0))) & (((d3 > 0) & (d4 < 0)) | ((d3 < 0) & (d4 > 0)))


def bucket_order(key, ncells):
    """Stable counting sort of slots by cell: (order, starts)."""
    key = np.asarray(key, dtype=np.int64)
    order = np.argsort(key, kind="stable").astype(np.int64)
    starts = np.zeros(ncells + 1, dtype=np.int64)
    np.cumsum(np.bincount(key, minlength=ncells), out=starts[1:])
    return order, starts


def descend(dist, nx, ny, x0, y0, cell, pos, segs, wx0, wy0, wcell, wnx, wny, wstarts, witems):
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    m = len(pos)
    dirs = np.zeros((m, 2), dtype=np.float64)
    status = np.full(m, 2, dtype=np.int8)
    if m == 0:
        return dirs, status
    px, py = pos[:, 0], pos[:, 1]
    ix = np.floor((px - x0) / cell).astype(np.int64)
    iy = np.floor((py - y0) / cell).astype(np.int64)
    inside = (ix >= 0) & (iy >= 0) & (ix < nx) & (iy < ny)
    own = np.where(inside, iy * nx + ix, 0)
    arrived = inside & (dist[own] == 0.0)
    status[arrived] = 1
    todo = np.nonzero(inside & ~arrived)[0]
    if len(todo) == 0:
        return dirs, status
    offs = [(dx, dy) for dy in range(-2, 3) for dx in range(-2, 3)]
    k = len(offs)
    tx, ty = ix[todo], iy[todo]
    qx, qy = px[todo], py[todo]
    cost = np.full((len(todo), k), INF)
    ex_all = np.zeros((len(todo), k))
    ey_all = np.zeros((len(todo), k))
    e_all = np.zeros((len(todo), k))
    for c, (dx, dy) in enumerate(offs):
        cx_i = tx + dx
        cy_i = ty + dy
        ok = (cx_i >= 0) & (cy_i >= 0) & (cx_i < nx) & (cy_i < ny)
        d = np.where(ok, dist[np.where(ok, cy_i * nx + cx_i, 0)], INF)
        cxx = x0 + (cx_i + 0.5) * cell
        cyy = y0 + (cy_i + 0.5) * cell
        ex = cxx - qx
        ey = cyy - qy
        e = np.sqrt(ex * ex + ey * ey)
        cst = d + e
        good = ok & (d != INF) & (e > 0.0)
        cost[:, c] = np.where(good, cst, INF)
        ex_all[:, c] = ex
        ey_all[:, c] = ey
        e_all[:, c] = e
    order = np.argsort(cost, axis=1, kind="stable")
    lo, hi = _wall_lists(qx, qy, wx0, wy0, wcell, wnx, wny, wstarts, witems)
    chosen = np.full(len(todo), -1, dtype=np.int64)
    pending = np.arange(len(todo))
    for rank in range(k):
        if len(pending) == 0:
            break
        c = order[pending, rank]
        finite = cost[pending, c] != INF
        pending = pending[finite]
        c = c[finite]
        if len(pending) == 0:
            break
        blocked = np.zeros(len(pending), dtype=bool)
        owner, flat = _expand(lo[pending], hi[pending])
        if len(owner):
            s = witems[flat]
            a = pending[owner]
            cc = c[owner]
            ex = ex_all[a, cc]
            ey = ey_all[a, cc]
            hit = _proper_cross(segs[s, 0], segs[s, 1], segs[s, 2], segs[s, 3],
                                qx[a], qy[a], qx[a] + ex, qy[a] + ey)
            blocked[owner[hit]] = True
        done = pending[~blocked]
        chosen[done] = c[~blocked]
        pending = pending[blocked]
    ok = chosen >= 0
    rows = np.nonzero(ok)[0]
    cc = chosen[rows]
    e = e_all[rows, cc]
    out = todo[rows]
    dirs[out, 0] = ex_all[rows, cc] / e
    dirs[out, 1] = ey_all[rows, cc] / e
    status[out] = 0
    return dirs, status


def pairs_within(pos, idx_from, active, r, period=0.0, x0=0.0):
    """All (i, j) with i in ``idx_from``, j active, j != i and |pj - pi| <= r."""
    pos = np.asarray(pos, dtype=np.float64)
    act = np.nonzero(active)[0]
    idx_from = np.asarray(idx_from, dtype=np.int64)
    if len(act) == 0 or len(idx_from) == 0 or r <= 0:
        e = np.zeros(0, np.int64)
        return e, e
    pa = pos[act]
    ymin = float(pa[:, 1].min()) - r
    if period > 0:
        ncx = max(1, int(math.floor(period / r)))
        cw = period / ncx
        gx = lambda x: np.clip(np.floor((x - x0) / cw).astype(np.int64), 0, ncx - 1)
    else:
        xmin = float(pa[:, 0].min()) - r
        gx = lambda x: np.floor((x - xmin) / r).astype(np.int64)
        ncx = 0
    gy = lambda y: np.floor((y - ymin) / r).astype(np.int64)
    acx, acy = gx(pa[:, 0]), gy(pa[:, 1])
    span = int(max(acy.max(), gy(pos[idx_from, 1]).max())) + 3
    key = acx * span + (acy + 1)
    order = np.argsort(key, kind="stable")
    skey = key[order]
    fx, fy = gx(pos[idx_from, 0]), gy(pos[idx_from, 1])
    I, J = [], []
    for ox in (-1, 0, 1):
        if period > 0:
            if ncx < 3 and ox != 0 and (ncx == 1 or ox == -1):
                continue  # wrapped column already visited
            col = (fx + ox) % ncx
        else:
            col = fx + ox
        for oy in (-1, 0, 1):
            target = col * span + (fy + oy + 1)
            lo = np.searchsorted(skey, target, "left")
            hi = np.searchsorted(skey, target, "right")
            owner, flat = _expand(lo, hi)
            I.append(idx_from[owner])
            J.append(act[order[flat]])
    I = np.concatenate(I)
    J = np.concatenate(J)
    keep = I != J
    I, J = I[keep], J[keep]
    wx = pos[J, 0] - pos[I, 0]
    if period > 0:
        wx = wx - period * np.floor(wx / period + 0.5)
    wy = pos[J, 1] - pos[I, 1]
    keep = wx * wx + wy * wy <= r * r
    return I[keep], J[keep]


def _min_image(dx, period):
    if period > 0:
        return dx - period * np.floor(dx / period + 0.5)
    return dx


def _candidate(k, dx, dy, s, ux, uy, cc, cs, cf):
    if k == 0:
        return dx, dy
    sp = cf[k] * s
    return sp * (cc[k] * ux - cs[k] * uy), sp * (cs[k] * ux + cc[k] * uy)


def avoid(pos, vel, radius, desired, mask, active, order, starts, hx0, hy0, hcw, hch, hnx, hny, period,
          perception, tau, dt, cc, cs, cf, segs, wx0, wy0, wcell, wnx, wny, wstarts, witems):
    pos = np.asarray(pos, dtype=np.float64)
    n = len(pos)
    out = np.zeros((n, 2), dtype=np.float64)
    dx, dy = desired[:, 0], desired[:, 1]
    s_all = np.sqrt(dx * dx + dy * dy)
    comp = np.nonzero((mask != 0) & (active != 0) & (s_all > 0.0))[0]
    if len(comp) == 0:
        return out
    s = s_all[comp]
    ux = dx[comp] / s
    uy = dy[comp] / s
    I, J = pairs_within(pos, comp, active, perception, period, hx0)
    # map global agent index -> row in comp
    row = np.full(n, -1, dtype=np.int64)
    row[comp] = np.arange(len(comp))
    Ir = row[I]
    wx = _min_image(pos[J, 0] - pos[I, 0], period)
    wy = pos[J, 1] - pos[I, 1]
    R = radius[I] + radius[J]
    RR = R * R
    ww = wx * wx + wy * wy
    vjx, vjy = vel[J, 0], vel[J, 1]
    px, py = pos[comp, 0], pos[comp, 1]
    lo, hi = _wall_lists(px, py, wx0, wy0, wcell, wnx, wny, wstarts, witems)
    Wo, Wf = _expand(lo, hi)
    Ws = witems[Wf] if len(Wf) else Wf
    rr_w = radius[comp][Wo] * radius[comp][Wo] if len(Wo) else np.zeros(0)

    res_x = np.zeros(len(comp))
    res_y = np.zeros(len(comp))
    undecided = np.ones(len(comp), dtype=bool)
    tl = tau
    for _level in range(HORIZON_LEVELS):
        for k in range(len(cc)):
            if not undecided.any():
                break
            vx, vy = _candidate(k, dx[comp], dy[comp], s, ux, uy, cc, cs, cf)
            bad = ~undecided.copy()
            # neighbours
            sel = undecided[Ir]
            if sel.any():
                a = Ir[sel]
                uxr = vx[a] - vjx[sel]
                uyr = vy[a] - vjy[sel]
                wxs, wys, rrs, wws = wx[sel], wy[sel], RR[sel], ww[sel]
                wu = wxs * uxr + wys * uyr
                uu = uxr * uxr + uyr * uyr
                overl = wws < rrs
                with np.errstate(divide="ignore", invalid="ignore"):
                    t = np.where(uu == 0.0, 0.0, wu / np.where(uu == 0.0, 1.0, uu))
                t = np.minimum(t, tl)
                ex = wxs - uxr * t
                ey = wys - uyr * t
                hit_far = (uu != 0.0) & (t > 0.0) & (ex * ex + ey * ey < rrs)
                hit = np.where(overl, wu > 0.0, hit_far)
                bad[a[hit]] = True
            # walls
            if len(Wo):
                selw = ~bad[Wo]
                if selw.any():
                    a = Wo[selw]
                    sidx = Ws[selw]
                    qx = px[a] + vx[a] * dt
                    qy = py[a] + vy[a] * dt
                    ax, ay, bx, by = segs[sidx, 0], segs[sidx, 1], segs[sidx, 2], segs[sidx, 3]
                    sx = bx - ax
                    sy = by - ay
                    ll = sx * sx + sy * sy
                    with np.errstate(divide="ignore", invalid="ignore"):
                        tt = np.where(ll == 0.0, 0.0, ((qx - ax) * sx + (qy - ay) * sy) / np.where(ll == 0.0, 1.0, ll))
                    tt = np.minimum(np.maximum(tt, 0.0), 1.0)
                    ex = qx - (ax + tt * sx)
                    ey = qy - (ay + tt * sy)
                    near = ex * ex + ey * ey < rr_w[selw]
                    cross = _proper_cross(ax, ay, bx, by, px[a], py[a], qx, qy)
                    bad[a[near | cross]] = True
            ok = undecided & ~bad
            res_x[ok] = vx[ok]
            res_y[ok] = vy[ok]
            undecided &= ~ok
        tl = tl * 0.5
    out[comp, 0] = res_x
    out[comp, 1] = res_y
    return out


def commit(pos, prop, radius, active, order, starts, hx0, hy0, hcw, hch, hnx, hny, period, dt):
    """Sequential commit in slot order; returns (new positions, moved flags).

    A proposal is accepted when it keeps clear of every other agent's current
    position: committed positions for lower slots, old ones for higher slots.
    """
    pos = np.asarray(pos, dtype=np.float64)
    n = len(pos)
    new = pos.copy()
    moved = np.zeros(n, dtype=np.uint8)
    if n == 0:
        return new, moved
    movers = np.nonzero((active != 0) & ((prop[:, 0] != 0.0) | (prop[:, 1] != 0.0)))[0]
    if len(movers) == 0:
        return new, moved
    qx = pos[movers, 0] + prop[movers, 0] * dt
    qy = pos[movers, 1] + prop[movers, 1] * dt
    q = pos.copy()
    q[movers, 0] = qx
    q[movers, 1] = qy
    rmax = float(radius[active != 0].max())
    step = float(np.sqrt(prop[movers, 0] ** 2 + prop[movers, 1] ** 2).max()) * dt
    reach = 2 * rmax + 2 * step + 1e-9
    I, J = pairs_within(pos, movers, active, reach, period, hx0)
    RR = (radius[I] + radius[J]) * (radius[I] + radius[J])
    d_old_x = _min_image(pos[J, 0] - q[I, 0], period)
    d_old_y = pos[J, 1] - q[I, 1]
    d_new_x = _min_image(q[J, 0] - q[I, 0], period)
    d_new_y = q[J, 1] - q[I, 1]
    risky = (d_old_x * d_old_x + d_old_y * d_old_y < RR) | (d_new_x * d_new_x + d_new_y * d_new_y < RR)
    dirty = np.zeros(n, dtype=bool)
    dirty[I[risky]] = True
    clean = movers[~dirty[movers]]
    new[clean] = q[clean]
    moved[clean] = 1
    dirty_ids = np.nonzero(dirty)[0]
    if len(dirty_ids) == 0:
        return new, moved
    # neighbour lists for the dirty movers, in ascending slot order
    sel = dirty[I]
    Id, Jd = I[sel], J[sel]
    o = np.lexsort((Jd, Id))
    Id, Jd = Id[o], Jd[o]
    bounds = np.searchsorted(Id, dirty_ids, "left"), np.searchsorted(Id, dirty_ids, "right")
    new_l = new.tolist()
    pos_l = pos.tolist()
    q_l = q.tolist()
    rad = radius.tolist()
    Jl = Jd.tolist()
    for t, i in enumerate(dirty_ids.tolist()):
        x, y = q_l[i]
        ri = rad[i]
        ok = True
        for k in range(bounds[0][t], bounds[1][t]):
            j = Jl[k]
            cx, cy = (new_l[j] if j < i else pos_l[j])
            ddx = cx - x
            if period > 0:
                ddx = ddx - period * math.floor(ddx / period + 0.5)
            ddy = cy - y
            R = ri + rad[j]
            if ddx * ddx + ddy * ddy < R * R:
                ok = False
                break
        if ok:
            new_l[i] = [x, y]
            moved[i] = 1
    new = np.asarray(new_l, dtype=np.float64).reshape(-1, 2)
    return new, moved
