"""Quantitative outputs computed from traces.

A :class:`Trace` holds the per-agent samples written by the engine.  Every
function here is pure: it reads a trace (or an engine snapshot) and returns
plain values.  "Inside an area" always means the agent centre lies in the
polygon, boundary included.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Polyline, points_in_polygon, polygon_area
from .scenario import PedFilter

TIME_EPS = 1e-9
FT2_TO_M2 = 0.09290304


class AnalysisError(ValueError):
    pass


# -- trace ------------------------------------------------------------------

@dataclass
class Trace:
    tick: np.ndarray
    time: np.ndarray
    agent: np.ndarray
    type: np.ndarray
    x: np.ndarray
    y: np.ndarray
    action: np.ndarray
    stage: np.ndarray
    speed: np.ndarray
    interval: float | None = None  # seconds between samples
    times: np.ndarray | None = None  # every sample time, including empty ones
    routes: dict = field(default_factory=dict)  # agent id -> route id, from the event log
    visited: dict = field(default_factory=dict)  # agent id -> set of node ids, from the event log

    def __post_init__(self):
        order = np.lexsort((self.agent, self.time))
        for name in ("tick", "time", "agent", "type", "x", "y", "action", "stage", "speed"):
            setattr(self, name, np.asarray(getattr(self, name))[order])
        if self.times is None:
            self.times = np.unique(self.time)
        else:
            self.times = np.asarray(sorted(set(np.round(np.asarray(self.times, float), 9)) |
                                           set(np.round(self.time, 9))), dtype=float)
        if self.interval is None and len(self.times) > 1:
            self.interval = float(np.min(np.diff(self.times)))

    def __len__(self):
        return len(self.agent)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @classmethod
    def from_records(cls, records, interval=None, times=None, routes=None, visited=None) -> "Trace":
        """``records``: iterables of (tick, time, agent, type, x, y, action, stage, speed)."""
        rows = list(records)
        cols = list(zip(*rows)) if rows else [()] * 9
        return cls(np.asarray(cols[0], dtype=np.int64), np.asarray(cols[1], dtype=float),
                   np.asarray(cols[2], dtype=np.int64), np.asarray(cols[3], dtype=object),
                   np.asarray(cols[4], dtype=float), np.asarray(cols[5], dtype=float),
                   np.asarray(cols[6], dtype=object), np.asarray(cols[7], dtype=np.int64),
                   np.asarray(cols[8], dtype=float), interval, times, dict(routes or {}), dict(visited or {}))

    @classmethod
    def from_csv(cls, source, meta: dict | None = None, events: str | None = None) -> "Trace":
        """Parse trace CSV text or a path.  Next to a path, ``run.json`` and
        ``events.csv`` are picked up automatically when present."""
        path = None
        if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
            path = Path(source)
            text = path.read_text(encoding="utf-8")
        else:
            text = source
        if path is not None:
            if meta is None and (path.parent / "run.json").exists():
                meta = json.loads((path.parent / "run.json").read_text(encoding="utf-8"))
            if events is None and (path.parent / "events.csv").exists():
                events = (path.parent / "events.csv").read_text(encoding="utf-8")
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None:
            raise AnalysisError("empty trace")
        want = ["tick", "time_s", "agent_id", "type", "x", "y", "action", "stage", "speed"]
        if [h.strip() for h in header] != want:
            raise AnalysisError(f"unexpected trace header {header}")
        recs = [(int(r[0]), float(r[1]), int(r[2]), r[3], float(r[4]), float(r[5]), r[6], int(r[7]), float(r[8]))
                for r in reader if r]
        interval = times = None
        if meta:
            interval = meta["dt"] * meta.get("every", 1)
            every = meta.get("every", 1)
            times = [(j * every) * meta["dt"] for j in range(1, meta["ticks"] // every + 1)]
        routes, visited = _from_events(events) if events else ({}, {})
        return cls.from_records(recs, interval, times, routes, visited)

    def at(self, t: float) -> np.ndarray:
        """Row mask of the sample at time ``t`` (nearest sample not after t)."""
        k = np.searchsorted(self.times, t + TIME_EPS, side="right") - 1
        if k < 0:
            return np.zeros(len(self), dtype=bool)
        return np.abs(self.time - self.times[k]) < TIME_EPS

    def window(self, interval) -> np.ndarray:
        """Sample times inside the closed interval (t0, t1)."""
        if interval is None:
            return self.times
        t0, t1 = interval
        return self.times[(self.times >= t0 - TIME_EPS) & (self.times <= t1 + TIME_EPS)]

    def agent_ids(self):
        return np.unique(self.agent)

    def segments(self):
        """Consecutive sample pairs per agent: (rows_from, rows_to).

        Samples are linked only when they are adjacent sample times, so an
        agent leaving the plane (escalator) does not draw a jump."""
        if len(self) < 2:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        order = np.lexsort((self.time, self.agent))
        a = order[:-1]
        b = order[1:]
        same = self.agent[a] == self.agent[b]
        gap = self.time[b] - self.time[a]
        lim = 1.5 * self.interval if self.interval else np.inf
        ok = same & (gap <= lim + TIME_EPS)
        return a[ok], b[ok]


def routes_from_events(text: str) -> dict:
    return _from_events(text)[0]


def _from_events(text: str):
    """(agent -> route, agent -> visited nodes) from an event log."""
    routes, visited = {}, {}
    for row in csv.DictReader(io.StringIO(text)):
        kv = dict(p.split("=", 1) for p in (row["detail"] or "").split(";") if "=" in p)
        kind = row["kind"]
        if kind == "spawn":
            routes[int(row["subject"])] = kv.get("route")
        elif kind in ("reach", "exit", "escalator_exit"):
            node = kv.get("node") or kv.get("sink") or kv.get("escalator")
            visited.setdefault(int(row["subject"]), set()).add(node)
    return routes, visited


def _agents_matching(trace: Trace, flt: PedFilter | None) -> set:
    """Agents passing the filter's per-agent parts: type (at first sample),
    id, destination route and visited nodes."""
    ids = [int(a) for a in trace.agent_ids()]
    if flt is None or flt.empty:
        return set(ids)
    first = {}
    for k in range(len(trace)):
        first.setdefault(int(trace.agent[k]), k)
    out = set()
    for ag in ids:
        k = first[ag]
        if flt.types is not None and trace.type[k] not in flt.types:
            continue
        if flt.agent_ids is not None and ag not in flt.agent_ids:
            continue
        if flt.destinations is not None and trace.routes.get(ag) not in flt.destinations:
            continue
        if flt.visited is not None and not flt.visited <= trace.visited.get(ag, set()):
            continue
        out.add(ag)
    return out


def _action_rows(trace: Trace, flt: PedFilter | None) -> np.ndarray:
    if flt is None or flt.actions is None:
        return np.ones(len(trace), dtype=bool)
    return np.isin(trace.action, list(flt.actions))


# -- measurement objects ----------------------------------------------------

@dataclass(frozen=True)
class MeasureLine:
    id: str
    polyline: Polyline
    directional: bool = False

    def __post_init__(self):
        pl = self.polyline if isinstance(self.polyline, Polyline) else Polyline(tuple(map(tuple, self.polyline)))
        if len(pl.vertices) < 2 or all(pl.vertices[0] == v for v in pl.vertices):
            raise AnalysisError(f"line {self.id}: degenerate polyline")
        object.__setattr__(self, "polyline", pl)


@dataclass(frozen=True)
class MeasureArea:
    id: str
    polygon: Polyline

    def __post_init__(self):
        pl = self.polygon if isinstance(self.polygon, Polyline) else Polyline(tuple(map(tuple, self.polygon)), True)
        if not pl.closed:
            pl = Polyline(pl.vertices, True)
        if not abs(polygon_area(pl.vertices)) > 0:
            raise AnalysisError(f"area {self.id}: zero area")
        object.__setattr__(self, "polygon", pl)

    @property
    def area(self) -> float:
        return abs(polygon_area(self.polygon.vertices))

    def contains(self, xy) -> np.ndarray:
        return points_in_polygon(np.asarray(xy, dtype=float).reshape(-1, 2), self.polygon.vertices)


def as_area(a) -> MeasureArea:
    if isinstance(a, MeasureArea):
        return a
    if isinstance(a, Polyline):
        return MeasureArea("area", a)
    return MeasureArea("area", Polyline(tuple(map(tuple, a)), True))


def as_line(l) -> MeasureLine:
    if isinstance(l, MeasureLine):
        return l
    if isinstance(l, Polyline):
        return MeasureLine("line", l)
    return MeasureLine("line", Polyline(tuple(map(tuple, l))))


# -- density and LOS ----------------------------------------------------------

@dataclass(frozen=True)
class LOSScale:
    """Upper density bounds (ped/m²) for A..E; anything above E is F."""
    name: str
    bounds: tuple
    levels: str = "ABCDEF"

    def __post_init__(self):
        b = tuple(float(x) for x in self.bounds)
        if len(b) != len(self.levels) - 1:
            raise AnalysisError("need one bound per level except the last")
        if any(not (y > x) for x, y in zip(b, b[1:])):
            raise AnalysisError("LOS bounds must be strictly increasing")
        object.__setattr__(self, "bounds", b)

    @classmethod
    def from_modules(cls, name: str, modules_ft2) -> "LOSScale":
        """Build from lower area-per-person limits in ft² (A first)."""
        return cls(name, tuple(1.0 / (m * FT2_TO_M2) for m in modules_ft2))


FRUIN_WALKWAY = LOSScale.from_modules("fruin_walkway", (35, 25, 15, 10, 5))
FRUIN_STAIRWAY = LOSScale.from_modules("fruin_stairway", (20, 15, 10, 7, 4))
FRUIN_QUEUING = LOSScale.from_modules("fruin_queuing", (13, 10, 7, 3, 2))
SCALES = {s.name: s for s in (FRUIN_WALKWAY, FRUIN_STAIRWAY, FRUIN_QUEUING)}


def los_classify(density: float, scale: LOSScale = FRUIN_WALKWAY) -> str:
    if density < 0:
        raise AnalysisError("density must be non-negative")
    for level, bound in zip(scale.levels, scale.bounds):
        if density <= bound:
            return level
    return scale.levels[-1]


def counts_in(trace: Trace, area, times=None, rows=None) -> np.ndarray:
    """Number of agent centres inside ``area`` at each of ``times``."""
    area = as_area(area)
    times = trace.times if times is None else np.asarray(times, dtype=float)
    sel = area.contains(trace.xy)
    if rows is not None:
        sel &= rows
    hit_times = trace.time[sel]
    idx = np.searchsorted(times, hit_times - TIME_EPS)
    ok = (idx < len(times))
    ok[ok] &= np.abs(times[idx[ok]] - hit_times[ok]) < TIME_EPS
    return np.bincount(idx[ok], minlength=len(times)).astype(np.int64)[:len(times)]


def local_density(trace: Trace, area, t: float) -> float:
    area = as_area(area)
    m = trace.at(t)
    n = int(area.contains(np.column_stack([trace.x[m], trace.y[m]])).sum())
    return n / area.area


def density_series(trace: Trace, area, interval=None):
    area = as_area(area)
    times = trace.window(interval)
    return times, counts_in(trace, area, times) / area.area


@dataclass(frozen=True)
class CMDResult:
    value: float
    samples: int
    truncated: bool = False
    note: str = ""


def cmd(trace: Trace, area, window: float, t: float) -> CMDResult:
    """Mean local density over the sample times in the half-open window
    (t - window, t]."""
    if not window > 0:
        raise AnalysisError("CMD window must be positive")
    area = as_area(area)
    lo = t - window
    sel = trace.times[(trace.times > lo + TIME_EPS) & (trace.times <= t + TIME_EPS)]
    start = trace.times[0] if len(trace.times) else 0.0
    truncated = lo < start - (trace.interval or 0.0) - TIME_EPS
    note = f"window truncated at run start {start:.3f} s" if truncated else ""
    if len(sel) == 0:
        return CMDResult(0.0, 0, truncated, note or "no samples in window")
    d = counts_in(trace, area, sel) / area.area
    return CMDResult(float(np.mean(d)), len(sel), truncated, note)


# -- grids: utilization, CMD maps -------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int

    def __post_init__(self):
        if not self.cell > 0 or self.nx < 1 or self.ny < 1:
            raise AnalysisError("grid needs a positive cell and at least one cell")

    @classmethod
    def covering(cls, x0, y0, x1, y1, cell) -> "GridSpec":
        return cls(float(x0), float(y0), float(cell), max(1, int(math.ceil((x1 - x0) / cell - 1e-9))),
                   max(1, int(math.ceil((y1 - y0) / cell - 1e-9))))

    def cell_of(self, xy) -> np.ndarray:
        """Flat cell index per point (row-major, y outer), -1 outside."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        ix = np.floor((xy[:, 0] - self.x0) / self.cell).astype(np.int64)
        iy = np.floor((xy[:, 1] - self.y0) / self.cell).astype(np.int64)
        ok = (ix >= 0) & (iy >= 0) & (ix < self.nx) & (iy < self.ny)
        return np.where(ok, iy * self.nx + ix, -1)


def _occupancy_matrix(trace: Trace, grid: GridSpec, times):
    """Boolean (len(times), cells) table: cell holds >= 1 agent centre."""
    occ = np.zeros((len(times), grid.nx * grid.ny), dtype=bool)
    if len(trace) == 0 or len(times) == 0:
        return occ
    cells = grid.cell_of(trace.xy)
    ti = np.searchsorted(times, trace.time - TIME_EPS)
    ok = (cells >= 0) & (ti < len(times))
    ok[ok] &= np.abs(times[ti[ok]] - trace.time[ok]) < TIME_EPS
    occ[ti[ok], cells[ok]] = True
    return occ


def utilization_grid(trace: Trace, grid: GridSpec, horizon=None) -> np.ndarray:
    """Per-cell fraction of sample ticks in ``horizon`` with the cell occupied;
    shape (ny, nx)."""
    times = trace.window(horizon)
    if len(times) == 0:
        return np.zeros((grid.ny, grid.nx))
    occ = _occupancy_matrix(trace, grid, times)
    return (occ.sum(axis=0) / len(times)).reshape(grid.ny, grid.nx)


def utilization(trace: Trace, cell, horizon=None) -> float:
    """Fraction of ticks with at least one agent centre in ``cell``
    = (x0, y0, size)."""
    x0, y0, size = cell
    return float(utilization_grid(trace, GridSpec(x0, y0, size, 1, 1), horizon)[0, 0])


def density_grid(trace: Trace, grid: GridSpec, t: float) -> np.ndarray:
    m = trace.at(t)
    cells = grid.cell_of(np.column_stack([trace.x[m], trace.y[m]]))
    counts = np.bincount(cells[cells >= 0], minlength=grid.nx * grid.ny)
    return (counts / (grid.cell * grid.cell)).reshape(grid.ny, grid.nx)


def cmd_grid(trace: Trace, grid: GridSpec, window: float, t: float) -> np.ndarray:
    if not window > 0:
        raise AnalysisError("CMD window must be positive")
    sel = trace.times[(trace.times > t - window + TIME_EPS) & (trace.times <= t + TIME_EPS)]
    if len(sel) == 0:
        return np.zeros((grid.ny, grid.nx))
    acc = np.zeros((grid.ny, grid.nx))
    for s in sel:
        acc += density_grid(trace, grid, s)
    return acc / len(sel)


def last_occupied(trace: Trace, grid: GridSpec, horizon=None) -> np.ndarray:
    """Latest sample time at which each cell held an agent; NaN if never."""
    times = trace.window(horizon)
    out = np.full(grid.nx * grid.ny, np.nan)
    occ = _occupancy_matrix(trace, grid, times)
    for k in range(len(times)):
        out[occ[k]] = times[k]
    return out.reshape(grid.ny, grid.nx)


# -- crossings -----------------------------------------------------------------

def _side(ax, ay, bx, by, px, py):
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def crossing_events(trace: Trace, line, rows=None) -> list:
    """(time, agent, sign) for every crossing of the polyline.

    A sample pair P->Q crosses segment AB when P and Q fall in different
    half-planes of AB and A, B fall in different half-planes of PQ; each
    half-plane test treats "on the line" as the left side, which counts a
    pass through a shared vertex exactly once.  sign = +1 when moving from
    the right of the line direction to its left.
    """
    line = as_line(line)
    a, b = trace.segments()
    if rows is not None:
        keep = rows[a]
        a, b = a[keep], b[keep]
    if len(a) == 0:
        return []
    px, py = trace.x[a], trace.y[a]
    qx, qy = trace.x[b], trace.y[b]
    out = []
    for (ax, ay), (bx, by) in line.polyline.segments():
        sp = _side(ax, ay, bx, by, px, py) >= 0
        sq = _side(ax, ay, bx, by, qx, qy) >= 0
        ta = _side(px, py, qx, qy, ax, ay) >= 0
        tb = _side(px, py, qx, qy, bx, by) >= 0
        for k in np.nonzero((sp != sq) & (ta != tb))[0]:
            out.append((float(trace.time[b[k]]), int(trace.agent[a[k]]), 1 if sq[k] else -1))
    out.sort()
    return out


@dataclass(frozen=True)
class CrossingResult:
    count: int
    positive: int
    negative: int
    net: int
    duration: float
    per_agent: dict = field(default_factory=dict)

    @property
    def rate(self) -> float:
        return self.count / self.duration if self.duration > 0 else math.nan


def _interval_of(trace: Trace, interval):
    if interval is not None:
        return float(interval[0]), float(interval[1])
    if len(trace.times) == 0:
        return 0.0, 0.0
    start = float(trace.times[0]) - (trace.interval or 0.0)
    return max(0.0, start), float(trace.times[-1])


def count_crossings(trace: Trace, line, second=None, interval=None, flt: PedFilter | None = None) -> CrossingResult:
    """Crossings of one line, or agents crossing ``line`` and later ``second``."""
    t0, t1 = _interval_of(trace, interval)
    keep = _agents_matching(trace, flt)
    rows = _action_rows(trace, flt)
    ev = [e for e in crossing_events(trace, line, rows) if t0 - TIME_EPS <= e[0] <= t1 + TIME_EPS and e[1] in keep]
    if second is None:
        pos = sum(1 for e in ev if e[2] > 0)
        neg = len(ev) - pos
        per = {}
        for _, ag, _s in ev:
            per[ag] = per.get(ag, 0) + 1
        directional = as_line(line).directional
        return CrossingResult(len(ev), pos, neg, pos - neg if directional else len(ev), t1 - t0, per)
    ev2 = [e for e in crossing_events(trace, second, rows) if t0 - TIME_EPS <= e[0] <= t1 + TIME_EPS and e[1] in keep]
    first_a = {}
    for t, ag, _ in ev:
        first_a.setdefault(ag, t)
    done = {}
    for t, ag, _ in ev2:
        if ag in first_a and t > first_a[ag] + TIME_EPS and ag not in done:
            done[ag] = t
    n = len(done)
    return CrossingResult(n, n, 0, n, t1 - t0, {a: 1 for a in done})


def count_inside(trace: Trace, area, t: float) -> int:
    area = as_area(area)
    m = trace.at(t)
    return int(area.contains(np.column_stack([trace.x[m], trace.y[m]])).sum())


# -- times -----------------------------------------------------------------------

def _entries(trace: Trace, area) -> list:
    """(time, agent) whenever an agent's sample is inside and its previous
    sample was not (or it has no previous sample)."""
    area = as_area(area)
    inside = area.contains(trace.xy)
    a, b = trace.segments()
    linked = np.zeros(len(trace), dtype=bool)
    linked[b] = True
    prev_inside = np.zeros(len(trace), dtype=bool)
    prev_inside[b] = inside[a]
    ent = inside & ~(linked & prev_inside)
    return sorted((float(trace.time[k]), int(trace.agent[k])) for k in np.nonzero(ent)[0])


def _passages(trace: Trace, obj) -> list:
    if isinstance(obj, MeasureArea) or (isinstance(obj, Polyline) and obj.closed):
        return _entries(trace, obj)
    return [(t, ag) for t, ag, _ in crossing_events(trace, obj)]


@dataclass(frozen=True)
class TimeResult:
    per_agent: tuple = ()  # ((agent, seconds), ...)
    excluded: int = 0

    @property
    def values(self):
        return [v for _, v in self.per_agent]

    @property
    def total(self) -> float:
        return math.fsum(self.values)

    @property
    def mean(self):
        return self.total / len(self.per_agent) if self.per_agent else None

    @property
    def max(self):
        return max(self.values) if self.per_agent else None


def transfer_times(trace: Trace, start, end, interval=None, flt: PedFilter | None = None) -> TimeResult:
    """Per agent: first passage of ``end`` after its last passage of ``start``.

    A passage is a line crossing, or an entry for an area.  Agents without
    a completed transfer in the interval (or not matching the filter) are
    counted in ``excluded``."""
    t0, t1 = _interval_of(trace, interval)
    keep = _agents_matching(trace, flt)
    inwin = lambda t: t0 - TIME_EPS <= t <= t1 + TIME_EPS  # noqa: E731
    starts = {}
    for t, ag in _passages(trace, start):
        if inwin(t):
            starts.setdefault(ag, []).append(t)
    ends = {}
    for t, ag in _passages(trace, end):
        if inwin(t):
            ends.setdefault(ag, []).append(t)
    out = []
    for ag in sorted(int(a) for a in trace.agent_ids()):
        if ag not in keep or ag not in starts:
            continue
        last = starts[ag][-1]
        after = [t for t in ends.get(ag, []) if t > last + TIME_EPS]
        if after:
            out.append((ag, after[0] - last))
    return TimeResult(tuple(out), len(trace.agent_ids()) - len(out))


def dwell_times(trace: Trace, area, interval=None, flt: PedFilter | None = None) -> TimeResult:
    """Time spent inside an area per contiguous visit (entry to last sample
    inside plus one sample interval)."""
    return _runs(trace, as_area(area).contains(trace.xy), interval, flt)


def action_times(trace: Trace, area, action: str, interval=None, flt: PedFilter | None = None) -> TimeResult:
    """Contiguous durations of ``action`` inside ``area``; one entry per run,
    each lasting (samples in the run) x sample interval."""
    if action not in ("waiting", "queuing", "delayed", "walking", "evacuating"):
        raise AnalysisError(f"unknown action {action!r}")
    mask = as_area(area).contains(trace.xy) & (trace.action == action)
    return _runs(trace, mask, interval, flt)


def _runs(trace: Trace, mask, interval, flt) -> TimeResult:
    mask = mask & _action_rows(trace, flt)
    dt = trace.interval or 0.0
    times = set(np.round(trace.window(interval), 9))
    keep = _agents_matching(trace, flt)
    order = np.lexsort((trace.time, trace.agent))
    out = []
    cur_agent, cur_len, cur_last = None, 0, None
    for k in order:
        ag = int(trace.agent[k])
        t = float(trace.time[k])
        ok = mask[k] and ag in keep and round(t, 9) in times
        contiguous = ag == cur_agent and cur_last is not None and t - cur_last <= 1.5 * dt + TIME_EPS
        if ok and cur_len and contiguous:
            cur_len += 1
            cur_last = t
            continue
        if cur_len:
            out.append((cur_agent, cur_len * dt))
        cur_agent, cur_len, cur_last = (ag, 1, t) if ok else (ag, 0, None)
    if cur_len:
        out.append((cur_agent, cur_len * dt))
    return TimeResult(tuple(out), 0)


@dataclass(frozen=True)
class DistanceResult:
    per_agent: tuple = ()

    @property
    def total(self) -> float:
        return math.fsum(v for _, v in self.per_agent)

    @property
    def mean(self):
        return self.total / len(self.per_agent) if self.per_agent else None


def distances(trace: Trace, area=None, flt: PedFilter | None = None, interval=None) -> DistanceResult:
    """Displacement summed over sample steps that start inside ``area``.
    Agents present in the area at least once are listed, possibly with 0."""
    keep = _agents_matching(trace, flt)
    times = set(np.round(trace.window(interval), 9))
    inside = as_area(area).contains(trace.xy) if area is not None else np.ones(len(trace), dtype=bool)
    intime = np.array([round(float(t), 9) in times for t in trace.time], dtype=bool)
    present = {int(a) for a in trace.agent[inside & intime]} & keep
    a, b = trace.segments()
    use = inside[a] & intime[b] & _action_rows(trace, flt)[a]
    step = np.hypot(trace.x[b] - trace.x[a], trace.y[b] - trace.y[a])
    acc = {ag: 0.0 for ag in present}
    for k in np.nonzero(use)[0]:
        ag = int(trace.agent[a[k]])
        if ag in acc:
            acc[ag] += float(step[k])
    return DistanceResult(tuple(sorted(acc.items())))


# -- composite indicators ----------------------------------------------------------

DEFAULT_SF_WEIGHTS = {"A": 1.0, "B": 2.0, "C": 3.0, "D": 4.0, "E": 5.0, "F": 6.0}


def level_exposure(trace: Trace, area, interval=None, scale: LOSScale = FRUIN_WALKWAY) -> dict:
    """Person-seconds spent in ``area`` at each LOS level."""
    area = as_area(area)
    times = trace.window(interval)
    dt = trace.interval or 0.0
    n = counts_in(trace, area, times)
    out = {lv: 0.0 for lv in scale.levels}
    for c in n:
        if c:
            out[los_classify(c / area.area, scale)] += c * dt
    return out


def service_factor(trace: Trace, area, interval=None, scale: LOSScale = FRUIN_WALKWAY, weights=None):
    """Exposure-weighted LOS; None when nobody was in the area."""
    w = dict(DEFAULT_SF_WEIGHTS if weights is None else weights)
    missing = [lv for lv in scale.levels if lv not in w]
    if missing:
        raise AnalysisError(f"missing weights for levels {missing}")
    exp = level_exposure(trace, area, interval, scale)
    tot = math.fsum(exp.values())
    if tot == 0:
        return None
    return math.fsum(w[lv] * exp[lv] / tot for lv in scale.levels)


@dataclass(frozen=True)
class SocialCostModel:
    value_of_time: float = 10.0  # currency per hour
    weights: dict = field(default_factory=lambda: {"walking": 1.0, "waiting": 1.5, "queuing": 2.0,
                                                   "delayed": 1.5, "evacuating": 1.0})

    def __post_init__(self):
        if self.value_of_time < 0:
            raise AnalysisError("value of time must be non-negative")
        if any(not v > 0 for v in self.weights.values()):
            raise AnalysisError("social cost weights must be positive")


def action_seconds(trace: Trace, interval=None) -> dict:
    times = set(np.round(trace.window(interval), 9))
    dt = trace.interval or 0.0
    out = {}
    for t, act in zip(trace.time, trace.action):
        if round(float(t), 9) in times:
            out[act] = out.get(act, 0.0) + dt
    return out


def social_cost(trace: Trace, model: SocialCostModel = SocialCostModel(), interval=None) -> float:
    secs = action_seconds(trace, interval)
    weighted = math.fsum(model.weights.get(a, 1.0) * s for a, s in secs.items())
    return weighted / 3600.0 * model.value_of_time


# -- export -------------------------------------------------------------------------

ANALYSIS_HEADER = ["time_s", "analysis", "subject", "metric", "value"]


@dataclass(frozen=True)
class Row:
    analysis: str
    subject: str
    metric: str
    value: object  # int | float | None
    time: float | None = None


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _parse(s: str):
    if s == "":
        return None
    try:
        return int(s)
    except ValueError:
        return float(s)


def export_analysis(rows) -> str:
    """CSV with columns time_s,analysis,subject,metric,value (blank = absent)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ANALYSIS_HEADER)
    for r in rows:
        w.writerow([_fmt(r.time), r.analysis, r.subject, r.metric, _fmt(r.value)])
    return buf.getvalue()


def parse_analysis_csv(text: str) -> list:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header != ANALYSIS_HEADER:
        raise AnalysisError(f"unexpected analysis header {header}")
    out = []
    for r in reader:
        if not r:
            continue
        t = _parse(r[0])
        out.append(Row(r[1], r[2], r[3], _parse(r[4]), None if t is None else float(t)))
    return out


def crossing_rows(name: str, res: CrossingResult) -> list:
    rows = [Row(name, "all", "count", res.count), Row(name, "all", "positive", res.positive),
            Row(name, "all", "negative", res.negative), Row(name, "all", "net", res.net),
            Row(name, "all", "rate_per_s", None if math.isnan(res.rate) else res.rate)]
    rows += [Row(name, str(a), "crossings", n) for a, n in sorted(res.per_agent.items())]
    return rows


def time_rows(name: str, res: TimeResult, metric: str = "seconds") -> list:
    rows = [Row(name, "all", "total_s", res.total), Row(name, "all", "mean_s", res.mean),
            Row(name, "all", "max_s", res.max), Row(name, "all", "count", len(res.per_agent)),
            Row(name, "all", "excluded", res.excluded)]
    rows += [Row(name, str(a), metric, v) for a, v in res.per_agent]
    return rows


def distance_rows(name: str, res: DistanceResult) -> list:
    rows = [Row(name, "all", "total_m", res.total), Row(name, "all", "mean_m", res.mean)]
    rows += [Row(name, str(a), "distance_m", v) for a, v in res.per_agent]
    return rows


# -- periodic analyses ---------------------------------------------------------

def schedule_auto(every: float, duration: float) -> list:
    """Emission times k * every for k >= 1 up to ``duration``."""
    if not every > 0:
        raise AnalysisError("every must be positive")
    n = int(math.floor(duration / every + 1e-9))
    return [k * every for k in range(1, n + 1)]


def snapshot_analyses(scenario, state, t: float) -> list:
    """Evaluate the scenario's automatic analyses on an engine snapshot.

    Each entry of ``scenario.analyses["auto"]`` is {"kind": ..., "area": id}
    with kind one of occupancy, local_density, los."""
    areas = scenario.monitor_areas()
    act = state.active == 1
    xy = state.pos[act]
    rows = []
    for spec in scenario.analyses.get("auto", []):
        kind, aid = spec["kind"], spec["area"]
        if aid not in areas:
            raise AnalysisError(f"automatic analysis refers to unknown area {aid!r}")
        poly = areas[aid]
        n = int(points_in_polygon(xy, poly.vertices).sum()) if len(xy) else 0
        d = n / poly.area
        if kind == "occupancy":
            rows.append(Row("auto", aid, "occupancy", n, t))
        elif kind == "local_density":
            rows.append(Row("auto", aid, "density", d, t))
        elif kind == "los":
            scale = SCALES[spec.get("scale", "fruin_walkway")]
            rows.append(Row("auto", aid, "los_" + los_classify(d, scale), d, t))
        else:
            raise AnalysisError(f"unknown automatic analysis {kind!r}")
    return rows


def run_spec(trace: Trace, spec: dict) -> list:
    """Run the analyses described by a spec dict (the bundle's analyses
    section or a standalone file) and return export rows.

    Recognised keys: "areas" {id: vertices}, "lines" {id: {"vertices", "directional"}},
    and "requests": list of {"kind", ...}."""
    areas = {k: MeasureArea(k, Polyline(tuple(map(tuple, v)), True)) for k, v in spec.get("areas", {}).items()}
    lines = {k: MeasureLine(k, Polyline(tuple(map(tuple, v["vertices"]))), bool(v.get("directional", False)))
             for k, v in spec.get("lines", {}).items()}

    def obj(name):
        if name in areas:
            return areas[name]
        if name in lines:
            return lines[name]
        raise AnalysisError(f"unknown area or line {name!r}")

    rows = []
    for req in spec.get("requests", []):
        kind = req["kind"]
        name = req.get("name", kind)
        interval = tuple(req["interval"]) if "interval" in req else None
        flt = PedFilter.from_json(req["filter"]) if "filter" in req else None
        if kind == "local_density":
            rows.append(Row(name, req["area"], "density", local_density(trace, obj(req["area"]), req["t"]), req["t"]))
        elif kind == "los":
            scale = SCALES[req.get("scale", "fruin_walkway")]
            d = local_density(trace, obj(req["area"]), req["t"])
            rows.append(Row(name, req["area"], "los_" + los_classify(d, scale), d, req["t"]))
        elif kind == "cmd":
            r = cmd(trace, obj(req["area"]), req["window"], req["t"])
            rows.append(Row(name, req["area"], "cmd", r.value, req["t"]))
            rows.append(Row(name, req["area"], "truncated", int(r.truncated), req["t"]))
        elif kind == "utilization":
            rows.append(Row(name, "cell", "fraction", utilization(trace, tuple(req["cell"]), interval)))
        elif kind == "count":
            second = obj(req["second"]) if "second" in req else None
            rows += crossing_rows(name, count_crossings(trace, obj(req["line"]), second, interval, flt))
        elif kind == "inside":
            rows.append(Row(name, req["area"], "count", count_inside(trace, obj(req["area"]), req["t"]), req["t"]))
        elif kind == "transfer":
            rows += time_rows(name, transfer_times(trace, obj(req["from"]), obj(req["to"]), interval, flt))
        elif kind == "dwell":
            rows += time_rows(name, dwell_times(trace, obj(req["area"]), interval, flt))
        elif kind == "action_time":
            rows += time_rows(name, action_times(trace, obj(req["area"]), req["action"], interval, flt))
        elif kind == "distance":
            rows += distance_rows(name, distances(trace, obj(req["area"]) if "area" in req else None, flt, interval))
        elif kind == "service_factor":
            scale = SCALES[req.get("scale", "fruin_walkway")]
            rows.append(Row(name, req["area"], "sf", service_factor(trace, obj(req["area"]), interval, scale,
                                                                     req.get("weights"))))
        elif kind == "social_cost":
            model = SocialCostModel(req.get("value_of_time", 10.0), req.get("weights") or SocialCostModel().weights)
            rows.append(Row(name, "all", "cost", social_cost(trace, model, interval)))
        else:
            raise AnalysisError(f"unknown analysis kind {kind!r}")
    return rows
