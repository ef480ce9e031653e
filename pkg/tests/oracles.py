"""Reference computations used as test oracles.

Each one is written from first principles and shares no code with the
package, so a bug in the library cannot hide in its own oracle.
"""
from __future__ import annotations

import heapq
import math
from fractions import Fraction

import numpy as np

SQFT_TO_SQM = 0.09290304  # exact by definition of the foot

# walkway area modules, ft2 per person, at the A/B, B/C, C/D, D/E, E/F limits
FRUIN_WALKWAY_FT2 = (35, 25, 15, 10, 5)


def fruin_walkway_bounds():
    """Upper density bounds (ped/m2) for levels A..E."""
    return [1.0 / (m * SQFT_TO_SQM) for m in FRUIN_WALKWAY_FT2]


def fruin_level(density: float) -> str:
    for letter, bound in zip("ABCDE", fruin_walkway_bounds()):
        if density <= bound:
            return letter
    return "F"


def uniform_spread(bin_start, bin_length, k):
    """Exact injection times (Fractions) of k arrivals spread over a bin."""
    s, L = Fraction(str(bin_start)), Fraction(str(bin_length))
    return [s + (i + Fraction(1, 2)) * L / k for i in range(k)]


def truncated_normal_mean(mean, sd, lo, hi, n=200001):
    """Mean of N(mean, sd) truncated to [lo, hi] by trapezoid integration."""
    x = np.linspace(lo, hi, n)
    pdf = np.exp(-0.5 * ((x - mean) / sd) ** 2)
    return float(np.trapezoid(x * pdf, x) / np.trapezoid(pdf, x)) if hasattr(np, "trapezoid") else \
        float(np.trapz(x * pdf, x) / np.trapz(pdf, x))


def grid_dijkstra(passable, nx, ny, cell, targets):
    """8-connected shortest distances on a grid with heapq; diagonal moves
    are allowed only when both orthogonal neighbours are passable."""
    inf = math.inf
    dist = [inf] * (nx * ny)
    heap = []
    for t in targets:
        dist[t] = 0.0
        heap.append((0.0, t))
    heapq.heapify(heap)
    diag = cell * math.sqrt(2.0)
    while heap:
        d, c = heapq.heappop(heap)
        if d > dist[c]:
            continue
        y, x = divmod(c, nx)
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                if dx == dy == 0:
                    continue
                xx, yy = x + dx, y + dy
                if not (0 <= xx < nx and 0 <= yy < ny):
                    continue
                n = yy * nx + xx
                if not passable[n]:
                    continue
                if dx and dy and not (passable[y * nx + xx] and passable[yy * nx + x]):
                    continue
                nd = d + (diag if dx and dy else cell)
                if nd < dist[n]:
                    dist[n] = nd
                    heapq.heappush(heap, (nd, n))
    return dist


def winding_contains(p, poly) -> bool:
    """Closed point-in-polygon: boundary points count as inside."""
    x, y = p
    n = len(poly)
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        cross = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        if cross == 0 and min(ax, bx) <= x <= max(ax, bx) and min(ay, by) <= y <= max(ay, by):
            return True
    wn = 0
    for i in range(n):
        (ax, ay), (bx, by) = poly[i], poly[(i + 1) % n]
        side = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        if ay <= y < by and side > 0:
            wn += 1
        elif by <= y < ay and side < 0:
            wn -= 1
    return wn != 0


def side_changes(points, a, b):
    """Signed count of side changes of a path relative to the infinite line
    through a and b.  Right to left counts +1.  Points exactly on the line
    are taken as left."""
    def left(p):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0
    pos = neg = 0
    for p, q in zip(points, points[1:]):
        lp, lq = left(p), left(q)
        if lq and not lp:
            pos += 1
        elif lp and not lq:
            neg += 1
    return pos, neg


def pairs_within(pos, r):
    """All index pairs (i < j) with centre distance <= r, O(n^2)."""
    pos = np.asarray(pos, float)
    out = set()
    for i in range(len(pos)):
        d = np.hypot(*(pos[i + 1:] - pos[i]).T)
        for j in np.nonzero(d <= r)[0]:
            out.add((i, i + 1 + int(j)))
    return out


def segment_distance(p, a, b) -> float:
    px, py = p
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    ll = dx * dx + dy * dy
    t = 0.0 if ll == 0 else max(0.0, min(1.0, ((px - ax) * dx + (py - ay) * dy) / ll))
    return math.hypot(px - ax - t * dx, py - ay - t * dy)
