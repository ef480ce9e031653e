"""Grid navigation fields: shortest-path distance (or travel time) to a target
over walkable cells, 8-connected with diagonal steps of length cell·sqrt(2).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import Environment, GeometryError, Polyline, WallIndex, points_in_polygon

DEFAULT_CELL = 0.25
DEFAULT_CLEARANCE = 0.2
FREE_FLOW_SPEED = 1.34
JAM_DENSITY = 5.4
MIN_SPEED_FRACTION = 0.2


class NavError(ValueError):
    pass


@dataclass
class NavGrid:
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    passable: np.ndarray  # uint8, flat, row-major (y outer)

    @property
    def shape(self):
        return (self.ny, self.nx)

    def centers(self):
        xs = self.x0 + (np.arange(self.nx) + 0.5) * self.cell
        ys = self.y0 + (np.arange(self.ny) + 0.5) * self.cell
        return xs, ys

    def index(self, p):
        ix = int(math.floor((p[0] - self.x0) / self.cell))
        iy = int(math.floor((p[1] - self.y0) / self.cell))
        if ix < 0 or iy < 0 or ix >= self.nx or iy >= self.ny:
            return None
        return iy * self.nx + ix

    def indices(self, xy: np.ndarray):
        """Flat cell index per point, -1 outside the grid."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        ix = np.floor((xy[:, 0] - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y0) / self.cell).astype(np.int64)
        ok = (ix >= 0) & (iy >= 0) & (ix < self.nx) & (iy < self.ny)
        return np.where(ok, iy * self.nx + ix, -1)


def build_grid(env: Environment, bounds=None, cell: float = DEFAULT_CELL,
               clearance: float = DEFAULT_CLEARANCE) -> NavGrid:
    """Rasterise walkability.  ``bounds`` (x0, y0, x1, y1) extends the grid
    beyond the obstacle bounding box, e.g. to cover scenario areas."""
    if not cell > 0:
        raise NavError("cell size must be positive")
    boxes = [b for b in (env.bbox, bounds) if b is not None]
    if not boxes:
        raise NavError("grid extent unknown: no obstacles and no bounds")
    bx0 = min(b[0] for b in boxes)
    by0 = min(b[1] for b in boxes)
    bx1 = max(b[2] for b in boxes)
    by1 = max(b[3] for b in boxes)
    x0 = bx0 - cell
    y0 = by0 - cell
    nx = int(math.ceil((bx1 - x0) / cell)) + 1
    ny = int(math.ceil((by1 - y0) / cell)) + 1
    blocked = np.zeros((ny, nx), dtype=bool)
    xs = x0 + (np.arange(nx) + 0.5) * cell
    ys = y0 + (np.arange(ny) + 0.5) * cell
    for o in env.active_obstacles():
        verts = np.asarray(o.shape.vertices, dtype=float)
        for (ax, ay), (bx, by) in o.shape.segments():
            i0 = max(0, int(math.floor((min(ax, bx) - clearance - x0) / cell)) - 1)
            i1 = min(nx - 1, int(math.floor((max(ax, bx) + clearance - x0) / cell)) + 1)
            j0 = max(0, int(math.floor((min(ay, by) - clearance - y0) / cell)) - 1)
            j1 = min(ny - 1, int(math.floor((max(ay, by) + clearance - y0) / cell)) + 1)
            if i1 < i0 or j1 < j0:
                continue
            gx, gy = np.meshgrid(xs[i0:i1 + 1], ys[j0:j1 + 1])
            dx, dy = bx - ax, by - ay
            ll = dx * dx + dy * dy
            t = np.clip(((gx - ax) * dx + (gy - ay) * dy) / ll, 0.0, 1.0) if ll > 0 else 0.0
            d2 = (gx - ax - t * dx) ** 2 + (gy - ay - t * dy) ** 2
            blocked[j0:j1 + 1, i0:i1 + 1] |= d2 < clearance * clearance
        if o.shape.closed:
            x_lo, y_lo, x_hi, y_hi = o.shape.bbox
            i0 = max(0, int(math.floor((x_lo - x0) / cell)))
            i1 = min(nx - 1, int(math.floor((x_hi - x0) / cell)))
            j0 = max(0, int(math.floor((y_lo - y0) / cell)))
            j1 = min(ny - 1, int(math.floor((y_hi - y0) / cell)))
            if i1 >= i0 and j1 >= j0:
                gx, gy = np.meshgrid(xs[i0:i1 + 1], ys[j0:j1 + 1])
                inside = points_in_polygon(np.column_stack([gx.ravel(), gy.ravel()]), verts)
                blocked[j0:j1 + 1, i0:i1 + 1] |= inside.reshape(gx.shape)
    return NavGrid(x0, y0, cell, nx, ny, (~blocked).astype(np.uint8).ravel())


def target_cells(grid: NavGrid, shape: Polyline) -> np.ndarray:
    """Passable cells covered by the target: centres inside a polygon, or
    within half a cell diagonal of a line.  Falls back to the centroid cell."""
    xs, ys = grid.centers()
    x_lo, y_lo, x_hi, y_hi = shape.bbox
    pad = grid.cell
    i0 = max(0, int(math.floor((x_lo - pad - grid.x0) / grid.cell)))
    i1 = min(grid.nx - 1, int(math.floor((x_hi + pad - grid.x0) / grid.cell)))
    j0 = max(0, int(math.floor((y_lo - pad - grid.y0) / grid.cell)))
    j1 = min(grid.ny - 1, int(math.floor((y_hi + pad - grid.y0) / grid.cell)))
    cells = np.zeros(0, dtype=np.int64)
    if i1 >= i0 and j1 >= j0:
        gx, gy = np.meshgrid(xs[i0:i1 + 1], ys[j0:j1 + 1])
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        if shape.closed:
            hit = points_in_polygon(pts, shape.vertices)
        else:
            reach = 0.5 * grid.cell * math.sqrt(2.0)
            hit = np.zeros(len(pts), dtype=bool)
            for (ax, ay), (bx, by) in shape.segments():
                dx, dy = bx - ax, by - ay
                ll = dx * dx + dy * dy
                t = np.clip(((pts[:, 0] - ax) * dx + (pts[:, 1] - ay) * dy) / ll, 0.0, 1.0)
                d2 = (pts[:, 0] - ax - t * dx) ** 2 + (pts[:, 1] - ay - t * dy) ** 2
                hit |= d2 <= reach * reach
        jj, ii = np.divmod(np.nonzero(hit)[0], i1 - i0 + 1)
        cells = (jj + j0) * grid.nx + (ii + i0)
    covered = len(cells) > 0
    cells = cells[grid.passable[cells] == 1] if covered else cells
    if len(cells) == 0:
        c = grid.index(shape.centroid)
        if c is not None and grid.passable[c]:
            return np.array([c], dtype=np.int64)
        raise NavError("target lies entirely inside obstacles")
    return np.sort(cells).astype(np.int64)


@dataclass
class NavField:
    target: str
    grid: NavGrid
    dist: np.ndarray  # (ny, nx); meters, or seconds for quickest-time fields
    walls: WallIndex | None = None
    kind: str = "distance"
    built_at: float = 0.0

    def value_at(self, p) -> float:
        c = self.grid.index(p)
        if c is None:
            return math.inf
        v = float(self.dist.ravel()[c])
        return v if math.isfinite(v) else self._lookahead(p)

    def values_at(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        idx = self.grid.indices(xy)
        flat = self.dist.ravel()
        out = np.where(idx >= 0, flat[np.maximum(idx, 0)], np.inf)
        for k in np.nonzero((idx >= 0) & ~np.isfinite(out))[0]:
            out[k] = self._lookahead(xy[k])
        return out

    def _lookahead(self, p) -> float:
        """Value for a position on a blocked cell (an agent squeezed against a
        wall): the cheapest 5x5 neighbour centre reachable in a straight line,
        the same candidates the descent kernel steers to."""
        from ._kernels_py import _proper_cross
        g = self.grid
        i = int(math.floor((p[0] - g.x0) / g.cell))
        j = int(math.floor((p[1] - g.y0) / g.cell))
        scale = 1.0 / 1.34 if self.kind == "time" else 1.0
        flat = self.dist.ravel()
        cands = []
        for dy in range(-2, 3):
            for dx in range(-2, 3):
                ii, jj = i + dx, j + dy
                if not (0 <= ii < g.nx and 0 <= jj < g.ny):
                    continue
                d = float(flat[jj * g.nx + ii])
                if not math.isfinite(d):
                    continue
                cx, cy = g.x0 + (ii + 0.5) * g.cell, g.y0 + (jj + 0.5) * g.cell
                cands.append((d + math.hypot(cx - p[0], cy - p[1]) * scale, cx, cy))
        segs = self.walls.segs[self.walls.candidates(p)] if self.walls is not None else np.zeros((0, 4))
        for cost, cx, cy in sorted(cands):
            if len(segs) and _proper_cross(segs[:, 0], segs[:, 1], segs[:, 2], segs[:, 3],
                                           p[0], p[1], cx, cy).any():
                continue
            return cost
        return math.inf

    def descend(self, xy):
        """(unit directions, status codes) for an (N, 2) array of positions."""
        return kernels.backend().descend(self.dist.ravel(), self.grid.nx, self.grid.ny, self.grid.x0,
                                         self.grid.y0, self.grid.cell,
                                         np.asarray(xy, dtype=np.float64).reshape(-1, 2),
                                         *kernels.wall_args(self.walls))


def build_nav_field(env: Environment | None, target, target_id: str = "target", *, grid: NavGrid | None = None,
                    walls: WallIndex | None = None, cell: float = DEFAULT_CELL,
                    clearance: float = DEFAULT_CLEARANCE, bounds=None, slowness=None,
                    kind: str = "distance") -> NavField:
    """Dijkstra field to ``target`` (a Polyline: closed polygon or line).

    ``slowness`` (per cell, s/m) turns the field into travel time; by default
    every cell costs 1 so values are meters.
    """
    if grid is None:
        if env is None:
            raise NavError("need an environment or a prebuilt grid")
        grid = build_grid(env, bounds, cell, clearance)
    if walls is None and env is not None:
        walls = WallIndex.build(env, margin=2.5 * math.sqrt(2.0) * grid.cell + 0.5)
    try:
        targets = target_cells(grid, target)
    except NavError as exc:
        raise NavError(f"target {target_id}: {exc}") from None
    if slowness is None:
        slowness = np.ones(grid.nx * grid.ny, dtype=np.float64)
    slowness = np.ascontiguousarray(slowness, dtype=np.float64).ravel()
    dist = kernels.backend().dijkstra(grid.passable, slowness, grid.nx, grid.ny, grid.cell,
                                      grid.cell * math.sqrt(2.0), targets)
    return NavField(target_id, grid, dist.reshape(grid.shape), walls, kind)


def box_density(grid: NavGrid, xy: np.ndarray, radius_m: float = 1.0) -> np.ndarray:
    """Agents per m² averaged over a (2k+1)² cell box, k = round(radius/cell)."""
    counts = np.zeros(grid.nx * grid.ny)
    idx = grid.indices(xy)
    idx = idx[idx >= 0]
    np.add.at(counts, idx, 1.0)
    counts = counts.reshape(grid.shape)
    k = max(0, int(round(radius_m / grid.cell)))
    c = np.pad(counts, k)
    s = np.cumsum(np.cumsum(c, axis=0), axis=1)
    s = np.pad(s, ((1, 0), (1, 0)))
    w = 2 * k + 1
    box = s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]
    return box / (w * w * grid.cell * grid.cell)


def quickest_slowness(density: np.ndarray, v_ff: float = FREE_FLOW_SPEED, rho_jam: float = JAM_DENSITY) -> np.ndarray:
    """Seconds per meter under a linear speed-density penalty."""
    frac = np.maximum(MIN_SPEED_FRACTION, 1.0 - np.asarray(density, dtype=float) / rho_jam)
    return (1.0 / (v_ff * frac)).ravel()
