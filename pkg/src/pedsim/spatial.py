"""Uniform-grid spatial hash over agent positions (counting sort by cell).

Agents inside a cell keep ascending slot order, so iteration is deterministic.
With ``period`` set, the x axis wraps over ``[x0, x0 + period)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels

MAX_CELLS = 40_000_000


@dataclass
class SpatialHash:
    x0: float
    y0: float
    cell_w: float
    cell_h: float
    nx: int
    ny: int
    period: float
    order: np.ndarray
    starts: np.ndarray

    def args(self):
        return (self.order, self.starts, self.x0, self.y0, self.cell_w, self.cell_h,
                self.nx, self.ny, self.period)

    def cell_of(self, x: float, y: float):
        ix = int(math.floor((x - self.x0) / self.cell_w))
        iy = int(math.floor((y - self.y0) / self.cell_h))
        return min(max(ix, 0), self.nx - 1), min(max(iy, 0), self.ny - 1)

    def columns(self, ix: int, ring: int):
        if self.period > 0:
            if 2 * ring + 1 >= self.nx:
                return range(self.nx)
            return [(ix + d) % self.nx for d in range(-ring, ring + 1)]
        return range(max(0, ix - ring), min(self.nx, ix + ring + 1))

    def query(self, p, r: float) -> np.ndarray:
        """Slots of every agent whose cell lies within ``r`` of ``p``'s cell
        (a superset of the agents within distance ``r``)."""
        ix, iy = self.cell_of(p[0], p[1])
        rx = int(math.ceil(r / self.cell_w))
        ry = int(math.ceil(r / self.cell_h))
        out = []
        for jy in range(max(0, iy - ry), min(self.ny, iy + ry + 1)):
            for jx in self.columns(ix, rx):
                c = jy * self.nx + jx
                a, b = self.starts[c], self.starts[c + 1]
                if b > a:
                    out.append(self.order[a:b])
        if not out:
            return np.zeros(0, dtype=np.int64)
        return np.sort(np.concatenate(out))


def build_hash(pos: np.ndarray, cell: float, period: tuple | None = None) -> SpatialHash:
    """Hash positions (N, 2) into square cells of side ``cell``.

    ``period`` is ``(x0, length)`` for a corridor that wraps in x.
    """
    pos = np.asarray(pos, dtype=np.float64).reshape(-1, 2)
    n = len(pos)
    if n == 0:
        return SpatialHash(0.0, 0.0, cell, cell, 1, 1, 0.0, np.zeros(0, np.int64), np.zeros(2, np.int64))
    ys = pos[:, 1]
    y0 = float(ys.min()) - cell
    ny = int(math.floor((float(ys.max()) - y0) / cell)) + 2
    if period is not None:
        x0, length = float(period[0]), float(period[1])
        nx = max(1, int(math.floor(length / cell)))
        cell_w = length / nx
        per = length
    else:
        xs = pos[:, 0]
        x0 = float(xs.min()) - cell
        nx = int(math.floor((float(xs.max()) - x0) / cell)) + 2
        cell_w = cell
        per = 0.0
    cell_h = cell
    while nx * ny > MAX_CELLS:
        # keep memory bounded on sparse, huge extents; queries stay supersets
        cell_h *= 2
        ny = int(math.floor((float(ys.max()) - y0) / cell_h)) + 2
        if period is None:
            cell_w *= 2
            nx = int(math.floor((float(pos[:, 0].max()) - x0) / cell_w)) + 2
    ix = np.clip(np.floor((pos[:, 0] - x0) / cell_w).astype(np.int64), 0, nx - 1)
    iy = np.clip(np.floor((pos[:, 1] - y0) / cell_h).astype(np.int64), 0, ny - 1)
    order, starts = kernels.backend().bucket_order(np.ascontiguousarray(iy * nx + ix), nx * ny)
    return SpatialHash(x0, y0, cell_w, cell_h, nx, ny, per, order, starts)


def brute_force_neighbors(pos: np.ndarray, p, r: float, period: float = 0.0) -> np.ndarray:
    d = np.asarray(pos, dtype=np.float64) - np.asarray(p, dtype=np.float64)
    if period > 0:
        d[:, 0] -= period * np.floor(d[:, 0] / period + 0.5)
    return np.nonzero((d * d).sum(axis=1) <= r * r)[0]
