"""Fixed-timestep simulation loop.

Each step runs, in order: spawning, triggers and evacuation, node
bookkeeping (delays, queues, waiting areas, escalators), desired velocity
and collision avoidance for every agent from the same snapshot, a sequential
commit in ascending agent id, sink absorption, monitors/trace/analyses, and
finally the clock advance.  Step ``k`` starts at ``k * dt``; trace rows hold
the state at the end of the step, time ``(k + 1) * dt``.
"""
from __future__ import annotations

import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kernels
from .agents import ACTIONS, DELAYED, EVACUATING, HORIZON, PERCEPTION_RADIUS, QUEUING, WAITING, WALKING, sample_attributes
from .demand import assign_types, spread_profile
from .geometry import WallIndex, point_in_polygon, points_in_polygon
from .navfield import (DEFAULT_CELL, DEFAULT_CLEARANCE, NavError, box_density, build_grid, build_nav_field,
                       quickest_slowness)
from .scenario import (EscalatorState, QueueState, RoutingError, Scenario, ScenarioError, choose_next,
                       compute_monitors, evaluate_triggers, AgentView, queue_abandon, queue_admit, queue_serve)
from .spatial import build_hash

TRACE_HEADER = "tick,time_s,agent_id,type,x,y,action,stage,speed\n"
EVENT_HEADER = "time_s,kind,subject,detail\n"
EPS_T = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Evacuation:
    trigger_time: float
    reaction: object = "variable"  # seconds | "variable" | {"uniform": [lo, hi]} | {"mean", "sd", "min", "max"}
    familiarity_default: float = 1.0

    def __post_init__(self):
        if self.trigger_time < 0:
            raise ConfigError("evacuation trigger time must be non-negative")
        if not (0 <= self.familiarity_default <= 1):
            raise ConfigError("familiarity must lie in [0, 1]")

    def sample(self, rng) -> float:
        r = self.reaction
        if r == "variable":
            r = {"uniform": [15.0, 60.0]}
        if isinstance(r, dict):
            if "uniform" in r:
                lo, hi = map(float, r["uniform"])
                return float(rng.uniform(lo, hi))
            from .scenario import Dist
            return Dist.of(r).sample(rng)
        return float(r)


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    duration: float = 60.0
    seed: int = 0
    evacuation: Evacuation | None = None
    trace_every: int = 1  # ticks between trace samples
    write_trace: bool = True
    nav_cell: float | None = None
    nav_clearance: float | None = None
    perception: float = PERCEPTION_RADIUS
    tau: float = HORIZON
    period: tuple | None = None  # (x0, length): x wraps around
    quickest_every: float = 5.0
    spawn_attempts: int = 100
    auto_every: float | None = None

    def __post_init__(self):
        if not (0 < self.dt <= 0.5):
            raise ConfigError("dt must lie in (0, 0.5]")
        if not self.duration > 0:
            raise ConfigError("duration must be positive")
        if int(self.trace_every) < 1:
            raise ConfigError("trace_every must be >= 1")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def ticks(self) -> int:
        return int(math.floor(self.duration / self.dt + 1e-9))


# -- static world ---------------------------------------------------------

class World:
    """Everything derived from the scenario that stays fixed during a run."""

    def __init__(self, scenario: Scenario, config: SimConfig):
        self.scenario = scenario
        sc = scenario
        self.type_names = list(sc.types)
        self.types = [sc.types[k] for k in self.type_names]
        self.route_names = list(sc.routes)
        self.node_names = sc.node_ids()
        self.node_index = {n: i for i, n in enumerate(self.node_names)}
        self.node_kind = [sc.node(n)[0] for n in self.node_names]
        self.rmax = max(t.radius for t in self.types)
        boost = max([1.0] + [float(z.effect.value) for z in sc.zones.values() if z.effect.kind == "speed_factor"])
        self.vmax = max(t.max_speed for t in self.types) * boost
        self.nav_cell = config.nav_cell or sc.config.get("nav_cell", DEFAULT_CELL)
        self.nav_clearance = config.nav_clearance if config.nav_clearance is not None else \
            sc.config.get("nav_clearance", DEFAULT_CLEARANCE)
        margin = max(self.rmax + 1.5 * self.vmax * config.dt, 2.5 * math.sqrt(2.0) * self.nav_cell) + 0.1
        self.walls = WallIndex.build(sc.environment, margin=margin, cell=max(1.0, margin))
        self.has_walls = len(self.walls.segs) > 0
        bounds = sc.bounds()
        if bounds is None:
            raise ScenarioError("scenario has no geometry or objects")
        self.grid = build_grid(sc.environment, bounds, self.nav_cell, self.nav_clearance)
        self.fields = {}
        self.qfields = {}
        # only monitors read by zone conditions are refreshed each tick
        wanted = {z.condition.monitor for z in sc.zones.values() if z.condition is not None}
        self.monitor_areas = {k: v for k, v in sc.monitor_areas().items() if k in wanted}
        self.sink_ids = sorted(sc.sinks)
        self.emergency = sc.emergency_sinks()
        self.default_exit = sc.default_exit()
        self.queue_spacing = 2 * self.rmax + 0.05
        # a body fits between two seated neighbours, so late arrivals can reach inner slots
        self.slot_spacing = 4 * self.rmax + 0.1
        self.waiting_slots = {}
        for wid, w in sc.waiting.items():
            pts = w.slots(self.slot_spacing, lambda p: self.walls.clear(p, self.rmax) if self.has_walls else True)
            self.waiting_slots[wid] = pts
        self.quickest_nodes = sorted({c for r in sc.routes.values() for s in r.stages if s.rule == "quickest_time"
                                      for c in s.candidates})
        self.stairs = [sc.stairs[k] for k in sorted(sc.stairs)]

    def field(self, node: str):
        f = self.fields.get(node)
        if f is None:
            f = build_nav_field(None, self.scenario.node_shape(node), node, grid=self.grid, walls=self.walls)
            self.fields[node] = f
        return f

    def distance(self, node, pos) -> float:
        return self.field(node).value_at(pos)

    def travel_time(self, node, pos) -> float:
        f = self.qfields.get(node) or self.field(node)
        v = f.value_at(pos)
        return v if f.kind == "time" else v / 1.34

    def rebuild_quickest(self, xy, clock):
        if not self.quickest_nodes:
            return
        rho = box_density(self.grid, xy, 1.0)
        slow = quickest_slowness(rho)
        for n in self.quickest_nodes:
            f = build_nav_field(None, self.scenario.node_shape(n), n, grid=self.grid, walls=self.walls,
                                slowness=slow, kind="time")
            f.built_at = clock
            self.qfields[n] = f


# -- mutable state ----------------------------------------------------------

_FLOAT_COLS = ("pref", "speed_mult", "bias_w", "hold_until", "react_at", "dist_acc", "entered_at", "radius")
_INT_COLS = ("ids", "type_idx", "route", "stage", "target", "slot")
_SMALL_COLS = ("action", "active", "familiar", "nav_time", "held", "err")


@dataclass
class SimState:
    world: World
    config: SimConfig
    rng: np.random.Generator
    tick: int = 0
    next_id: int = 1
    spawned: int = 0
    exited: int = 0
    arrivals: list = field(default_factory=list)  # (time, source, route, type) sorted
    arrival_ptr: int = 0
    deferred: list = field(default_factory=list)
    events: list = field(default_factory=list)
    monitors: dict = field(default_factory=dict)
    applied: set = field(default_factory=set)
    visited: dict = field(default_factory=dict)
    queues: dict = field(default_factory=dict)
    escalators: dict = field(default_factory=dict)
    waiting_used: dict = field(default_factory=dict)  # area -> {slot index: agent id}
    waiting_members: dict = field(default_factory=dict)  # area -> [agent ids] in arrival order
    released: set = field(default_factory=set)
    alarm: bool = False
    alarm_time: float | None = None
    last_exit: float | None = None
    conservation_ok: bool = True
    auto_rows: list = field(default_factory=list)
    escalator_log: dict = field(default_factory=dict)
    trace: io.StringIO | None = None

    def __post_init__(self):
        n = 0
        self.pos = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self.bias = np.zeros((n, 2))
        self.goal = np.zeros((n, 2))
        for c in _FLOAT_COLS:
            setattr(self, c, np.zeros(n))
        for c in _INT_COLS:
            setattr(self, c, np.zeros(n, dtype=np.int64))
        for c in _SMALL_COLS:
            setattr(self, c, np.zeros(n, dtype=np.uint8 if c != "action" else np.int8))

    @property
    def clock(self) -> float:
        return self.tick * self.config.dt

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def alive(self) -> int:
        return self.n

    def slot_of(self, agent_id: int) -> int:
        k = int(np.searchsorted(self.ids, agent_id))
        if k >= self.n or self.ids[k] != agent_id:
            raise KeyError(agent_id)
        return k

    def _cols(self):
        return ("pos", "vel", "bias", "goal") + _FLOAT_COLS + _INT_COLS + _SMALL_COLS

    def append(self, rows: dict) -> None:
        for c in self._cols():
            cur = getattr(self, c)
            add = np.asarray(rows[c], dtype=cur.dtype).reshape((-1,) + cur.shape[1:])
            setattr(self, c, np.concatenate([cur, add]))

    def keep(self, mask: np.ndarray) -> None:
        for c in self._cols():
            setattr(self, c, getattr(self, c)[mask])

    def log(self, time: float, kind: str, subject, detail: str = "") -> None:
        self.events.append((time, kind, str(subject), detail))


def _arrivals(scenario: Scenario):
    matrix = scenario.demand.current()
    out = []
    for sid in sorted(scenario.sources):
        src = scenario.sources[sid]
        if not matrix.for_origin(sid):
            continue
        prof = spread_profile(matrix, sid, src.policy)
        types = assign_types(src.mix, len(prof))
        for (t, route), typ in zip(prof.entries, types):
            out.append((t, sid, route, typ))
    out.sort(key=lambda a: (a[0], a[1]))
    return out


def init_state(scenario: Scenario, config: SimConfig) -> SimState:
    world = World(scenario, config)
    st = SimState(world, config, np.random.default_rng(int(config.seed)))
    st.arrivals = _arrivals(scenario)
    for qid, q in scenario.queues.items():
        st.queues[qid] = QueueState(q.servers)
    for eid, e in scenario.escalators.items():
        st.escalators[eid] = EscalatorState.for_link(e, config.dt)
        st.escalator_log[eid] = []
    for wid in scenario.waiting:
        st.waiting_used[wid] = {}
        st.waiting_members[wid] = []
    if config.write_trace:
        st.trace = io.StringIO()
        st.trace.write(TRACE_HEADER)
    world.rebuild_quickest(st.pos, 0.0)
    return st


# -- helpers ----------------------------------------------------------------

def _disc_overlaps(xy, r, poly) -> np.ndarray:
    """Disc (centre, radius) intersects the closed polygon."""
    x0, y0, x1, y1 = poly.bbox
    near = (xy[:, 0] >= x0 - r) & (xy[:, 0] <= x1 + r) & (xy[:, 1] >= y0 - r) & (xy[:, 1] <= y1 + r)
    hit = np.zeros(len(xy), dtype=bool)
    if not near.any():
        return hit
    if not near.all():
        hit[near] = _disc_overlaps(xy[near], r, poly)
        return hit
    hit = points_in_polygon(xy, poly.vertices)
    for a, b in poly.segments():
        ax, ay, bx, by = a.x, a.y, b.x, b.y
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        t = np.clip(((xy[:, 0] - ax) * dx + (xy[:, 1] - ay) * dy) / ll, 0.0, 1.0)
        ex = xy[:, 0] - (ax + t * dx)
        ey = xy[:, 1] - (ay + t * dy)
        hit |= ex * ex + ey * ey < r * r
    return hit


def _fmt_detail(**kw) -> str:
    return ";".join(f"{k}={v}" for k, v in kw.items())


def _wrap(st: SimState):
    per = st.config.period
    if per is not None and st.n:
        x0, length = per
        st.pos[:, 0] = st.pos[:, 0] - length * np.floor((st.pos[:, 0] - x0) / length)


# -- phase 1: spawning -----------------------------------------------------

class _SpawnGrid:
    def __init__(self, st: SimState, cell: float):
        self.cell = cell
        self.st = st
        act = st.active.astype(bool)
        self.xy = st.pos[act]
        self.r = st.radius[act]
        self.h = build_hash(self.xy, cell, st.config.period) if len(self.xy) else None
        self.new = {}

    def free(self, p, r) -> bool:
        per = self.st.config.period
        reach = r + self.st.world.rmax
        if self.h is not None:
            for j in self.h.query(p, reach):
                dx = self.xy[j, 0] - p[0]
                if per is not None:
                    dx -= per[1] * math.floor(dx / per[1] + 0.5)
                dy = self.xy[j, 1] - p[1]
                R = r + self.r[j]
                if dx * dx + dy * dy < R * R:
                    return False
        ix, iy = int(math.floor(p[0] / self.cell)), int(math.floor(p[1] / self.cell))
        for gx in (ix - 1, ix, ix + 1):
            for gy in (iy - 1, iy, iy + 1):
                for (qx, qy, qr) in self.new.get((gx, gy), ()):
                    dx = qx - p[0]
                    if per is not None:
                        dx -= per[1] * math.floor(dx / per[1] + 0.5)
                    R = r + qr
                    if dx * dx + (qy - p[1]) ** 2 < R * R:
                        return False
        return True

    def add(self, p, r):
        key = (int(math.floor(p[0] / self.cell)), int(math.floor(p[1] / self.cell)))
        self.new.setdefault(key, []).append((p[0], p[1], r))


def _sample_in(st: SimState, poly, r, grid: _SpawnGrid):
    x0, y0, x1, y1 = poly.bbox
    w = st.world
    for _ in range(st.config.spawn_attempts):
        u = st.rng.random(2)
        p = (x0 + float(u[0]) * (x1 - x0), y0 + float(u[1]) * (y1 - y0))
        if not point_in_polygon(p, poly.vertices):
            continue
        if w.has_walls and not w.walls.clear(p, r):
            continue
        if st.config.period is not None:
            x = p[0] - st.config.period[1] * math.floor((p[0] - st.config.period[0]) / st.config.period[1])
            p = (x, p[1])
        if grid.free(p, r):
            return p
    return None


def _spawn(st: SimState) -> None:
    if st.alarm:
        return
    clock = st.clock
    due = list(st.deferred)
    st.deferred = []
    while st.arrival_ptr < len(st.arrivals) and st.arrivals[st.arrival_ptr][0] <= clock + EPS_T:
        due.append(st.arrivals[st.arrival_ptr])
        st.arrival_ptr += 1
    if not due:
        return
    w = st.world
    sc = w.scenario
    grid = _SpawnGrid(st, max(2 * w.rmax, 0.1))
    rows = {c: [] for c in st._cols()}
    evac = st.config.evacuation
    full = set()  # sources that could not place an agent this tick
    for arr in due:
        t, sid, route, typ = arr[:4]
        if typ not in sc.types:
            st.log(clock, "routing_error", sid, _fmt_detail(reason="unknown_type", type=typ))
            continue
        ptype = sc.types[typ]
        p = None
        if sid not in full:
            pref, r = sample_attributes(ptype, st.rng)
            p = _sample_in(st, sc.sources[sid].polygon, r, grid)
        if p is None:
            # later arrivals wait behind this one, keeping their order
            full.add(sid)
            if len(arr) == 4:
                st.log(clock, "spawn_deferred", sid, _fmt_detail(type=typ, route=route))
                arr = arr + (True,)
            st.deferred.append(arr)
            continue
        grid.add(p, r)
        fam = 1
        if evac is not None:
            level = ptype.familiarity if ptype.familiarity is not None else evac.familiarity_default
            fam = int(st.rng.random() < level)
        aid = st.next_id
        st.next_id += 1
        st.spawned += 1
        st.visited[aid] = set()
        vals = dict(pos=p, vel=(0.0, 0.0), bias=(0.0, 0.0), goal=(math.nan, math.nan), pref=pref, speed_mult=1.0,
                    bias_w=0.0, hold_until=math.inf, react_at=math.inf, dist_acc=0.0, entered_at=clock, radius=r,
                    ids=aid, type_idx=w.type_names.index(typ), route=w.route_names.index(route), stage=-1, target=-1,
                    slot=-1, action=WALKING, active=1, familiar=fam, nav_time=0, held=0, err=0)
        for c, v in vals.items():
            rows[c].append(v)
        st.log(clock, "spawn", aid, _fmt_detail(type=typ, route=route, source=sid))
    if rows["ids"]:
        st.append(rows)
        for aid in rows["ids"]:
            _advance(st, st.slot_of(aid))


# -- routing ----------------------------------------------------------------

def _route_candidates_error(st: SimState, k: int, why: str):
    """Log a routing error and send the agent to the nearest reachable sink."""
    w = st.world
    aid = int(st.ids[k])
    st.log(st.clock, "routing_error", aid, _fmt_detail(reason=why))
    pos = tuple(st.pos[k])
    best = min(((w.distance(s, pos), s) for s in w.sink_ids), default=(math.inf, None))
    if best[1] is None or not math.isfinite(best[0]):
        st.target[k] = -1
        st.err[k] = 1
        return
    _set_target(st, k, best[1])


def _set_target(st: SimState, k: int, node: str, nav_time: bool = False):
    st.target[k] = st.world.node_index[node]
    st.nav_time[k] = 1 if nav_time else 0
    st.err[k] = 0


def _monitor_occupancy(st: SimState) -> dict:
    counts = np.bincount(st.target[st.target >= 0], minlength=len(st.world.node_names))
    return {n: int(counts[i]) for i, n in enumerate(st.world.node_names)}


def _advance(st: SimState, k: int) -> None:
    """Move agent in slot ``k`` to the next stage of its route."""
    w = st.world
    route = w.scenario.routes[w.route_names[st.route[k]]]
    nxt = int(st.stage[k]) + 1
    st.action[k] = EVACUATING if st.action[k] == EVACUATING else WALKING
    st.hold_until[k] = math.inf
    st.goal[k] = (math.nan, math.nan)
    st.held[k] = 0
    if nxt >= len(route.stages):
        _route_candidates_error(st, k, "route_exhausted")
        return
    st.stage[k] = nxt
    stage = route.stages[nxt]
    pos = tuple(st.pos[k])
    try:
        node = choose_next(stage, _monitor_occupancy(st) if stage.rule == "least_occupancy" else None, st.rng,
                           w.distance, w.travel_time, pos)
    except RoutingError:
        _route_candidates_error(st, k, "no_reachable_candidate")
        return
    _set_target(st, k, node, stage.rule == "quickest_time")


def _retarget(st: SimState, k: int, route_or_node: str):
    w = st.world
    sc = w.scenario
    if route_or_node in sc.routes:
        st.route[k] = w.route_names.index(route_or_node)
        st.stage[k] = -1
        _advance(st, k)
    else:
        _set_target(st, k, route_or_node)


def _leave_node(st: SimState, k: int):
    """Release whatever the agent holds at its current node (slot, queue place)."""
    w = st.world
    aid = int(st.ids[k])
    if st.target[k] < 0:
        return
    node = w.node_names[st.target[k]]
    kind = w.node_kind[st.target[k]]
    if kind == "waiting":
        used = st.waiting_used[node]
        if st.slot[k] >= 0:
            used.pop(int(st.slot[k]), None)
        if aid in st.waiting_members[node]:
            st.waiting_members[node].remove(aid)
    elif kind == "queues" and st.action[k] == QUEUING:
        if queue_abandon(st.queues[node], aid):
            st.log(st.clock, "queue_abandon", aid, _fmt_detail(queue=node))
    st.slot[k] = -1


# -- phase 2: triggers and evacuation ---------------------------------------

def trigger_evacuation(st: SimState, clock: float | None = None) -> None:
    """Raise the alarm: every alive agent draws a reaction delay."""
    evac = st.config.evacuation
    if evac is None:
        raise ConfigError("no evacuation configured")
    if st.alarm:
        return
    clock = evac.trigger_time if clock is None else clock
    st.alarm = True
    st.alarm_time = clock
    st.log(clock, "evacuation", "alarm", _fmt_detail(agents=st.n))
    for k in range(st.n):
        st.react_at[k] = clock + evac.sample(st.rng)


def _nearest_exit(st: SimState, k: int):
    w = st.world
    pos = tuple(st.pos[k])
    cands = list(w.emergency)
    if not st.familiar[k]:
        seen = st.visited.get(int(st.ids[k]), set())
        cands = sorted({c for c in cands if c in seen} | ({w.default_exit} if w.default_exit else set()))
    scored = [(w.distance(c, pos), c) for c in cands]
    scored = [s for s in scored if math.isfinite(s[0])]
    if not scored:
        return None
    return min(scored)[1]


def _react(st: SimState) -> None:
    if not st.alarm:
        return
    due = np.nonzero((st.react_at <= st.clock + EPS_T) & (st.active == 1) & (st.action != EVACUATING))[0]
    for k in due:
        _leave_node(st, k)
        st.visited.get(int(st.ids[k]), set())
        exit_ = _nearest_exit(st, k)
        st.action[k] = EVACUATING
        st.hold_until[k] = math.inf
        st.goal[k] = (math.nan, math.nan)
        st.held[k] = 0
        st.speed_mult[k] = 1.0
        st.bias_w[k] = 0.0
        if exit_ is None:
            st.log(st.clock, "routing_error", int(st.ids[k]), _fmt_detail(reason="no_reachable_exit"))
            st.target[k] = -1
            st.err[k] = 1
        else:
            _set_target(st, k, exit_)
            st.stage[k] = len(st.world.scenario.routes[st.world.route_names[st.route[k]]].stages) - 1
            st.log(st.clock, "react", int(st.ids[k]), _fmt_detail(exit=exit_))


def _zones(st: SimState) -> None:
    w = st.world
    sc = w.scenario
    if not sc.zones or st.n == 0:
        st.applied.clear()
        return
    active = st.active == 1
    inside_any = np.zeros(st.n, dtype=bool)
    for z in sc.zones.values():
        inside_any |= points_in_polygon(st.pos, z.polygon.vertices)
    cand = np.nonzero(inside_any & active)[0]
    ids_in = {int(st.ids[k]) for k in cand}
    before = set(st.applied)
    st.applied.intersection_update({key for key in st.applied if key[0] in ids_in})
    views = [AgentView(int(st.ids[k]), w.type_names[st.type_idx[k]], tuple(st.pos[k]),
                       w.route_names[st.route[k]], w.node_names[st.target[k]] if st.target[k] >= 0 else None,
                       frozenset(st.visited.get(int(st.ids[k]), ())), ACTIONS[st.action[k]]) for k in cand]
    fired = evaluate_triggers(sc.zones, views, st.monitors, st.clock, st.applied)
    for aid, zid in sorted(before - st.applied):
        eff = sc.zones[zid].effect
        if aid in ids_in or aid in set(st.ids.tolist()):
            try:
                k = st.slot_of(aid)
            except KeyError:
                continue
            if eff.kind == "speed_factor":
                st.speed_mult[k] = 1.0
            elif eff.kind == "direction_bias":
                st.bias_w[k] = 0.0
    for aid, zid, eff in fired:
        k = st.slot_of(aid)
        if eff.kind == "speed_factor":
            st.speed_mult[k] = float(eff.value)
        elif eff.kind == "direction_bias":
            st.bias[k] = eff.value[:2]
            st.bias_w[k] = eff.value[2]
        elif eff.kind == "set_type":
            ptype = sc.types[eff.value]
            pref, _ = sample_attributes(ptype, st.rng)
            st.type_idx[k] = w.type_names.index(eff.value)
            st.pref[k] = pref
        elif eff.kind == "set_target":
            if st.action[k] in (WALKING, EVACUATING):
                _retarget(st, k, eff.value)
        st.log(st.clock, "zone_effect", aid, _fmt_detail(zone=zid, effect=eff.kind))


# -- phase 3: node bookkeeping ----------------------------------------------

def _event_fired(st: SimState, name: str) -> bool:
    if name == "alarm":
        return st.alarm
    t = st.world.scenario.events.get(name)
    return t is not None and st.clock >= t - EPS_T


def _bookkeeping(st: SimState) -> None:
    w = st.world
    sc = w.scenario
    clock = st.clock
    # delays
    for k in np.nonzero((st.action == DELAYED) & (st.hold_until <= clock + EPS_T))[0]:
        _advance(st, k)
    # queues
    for qid in sorted(st.queues):
        for aid, done in queue_serve(st.queues[qid], clock):
            k = st.slot_of(aid)
            st.log(clock, "queue_serve", aid, _fmt_detail(queue=qid, completion=f"{done:.6f}"))
            _advance(st, k)
    # waiting areas
    for wid in sorted(sc.waiting):
        area = sc.waiting[wid]
        if wid not in st.released:
            due = (area.release_time is not None and clock >= area.release_time - EPS_T) or \
                  (area.release_event is not None and _event_fired(st, area.release_event))
            if due:
                st.released.add(wid)
                st.log(clock, "release", wid, _fmt_detail(agents=len(st.waiting_members[wid])))
        if wid in st.released and st.waiting_members[wid]:
            for aid in list(st.waiting_members[wid]):
                k = st.slot_of(aid)
                _leave_node(st, k)
                _advance(st, k)
        elif st.waiting_members[wid]:
            _fill_slots(st, wid)
    # escalators: exits, then admissions
    for eid in sorted(st.escalators):
        es = st.escalators[eid]
        link = sc.escalators[eid]
        still = []
        for exit_tick, aid in sorted(es.in_transit):
            if exit_tick > st.tick:
                still.append((exit_tick, aid))
                continue
            k = st.slot_of(aid)
            p = _exit_point(st, link, float(st.radius[k]))
            if p is None:
                still.append((exit_tick, aid))
                continue
            st.pos[k] = p
            st.vel[k] = (0.0, 0.0)
            st.active[k] = 1
            st.visited[aid].add(eid)
            st.log(clock, "escalator_exit", aid, _fmt_detail(escalator=eid))
            _advance(st, k)
        es.in_transit = still
    _reach(st)
    # quickest-time fields
    if w.quickest_nodes and st.tick > 0:
        every = max(1, int(round(st.config.quickest_every / st.config.dt)))
        if st.tick % every == 0:
            w.rebuild_quickest(st.pos[st.active == 1], clock)


def _fill_slots(st: SimState, wid: str):
    w = st.world
    area = w.scenario.waiting[wid]
    slots = w.waiting_slots[wid]
    used = st.waiting_used[wid]
    for aid in st.waiting_members[wid]:
        k = st.slot_of(aid)
        if st.slot[k] >= 0:
            continue
        free = [i for i in range(len(slots)) if i not in used]
        if not free:
            return
        if area.fill_rule == "uniform_random":
            i = free[int(st.rng.integers(len(free)))]
        else:
            ex, ey = area.entry_point
            d = [(slots[i, 0] - ex) ** 2 + (slots[i, 1] - ey) ** 2 for i in free]
            i = free[int(np.argmin(d))]
        used[i] = aid
        st.slot[k] = i
        st.goal[k] = slots[i]


def _exit_point(st: SimState, link, r):
    verts = link.exit.vertices
    a, b = verts[0], verts[-1]
    act = st.active == 1
    xy = st.pos[act]
    rad = st.radius[act]
    for f in (0.5, 0.3, 0.7, 0.1, 0.9):
        p = (a.x + f * (b.x - a.x), a.y + f * (b.y - a.y))
        if st.world.has_walls and not st.world.walls.clear(p, r):
            continue
        if len(xy):
            d2 = (xy[:, 0] - p[0]) ** 2 + (xy[:, 1] - p[1]) ** 2
            if np.any(d2 < (rad + r) ** 2):
                continue
        return p
    return None


def _reach(st: SimState) -> None:
    """Detect walking agents standing on a target cell of a non-sink node."""
    w = st.world
    sc = w.scenario
    clock = st.clock
    moving = (st.active == 1) & (st.target >= 0) & ((st.action == WALKING) | (st.action == EVACUATING)) & \
             (st.held == 0)
    if not moving.any():
        return
    idx = np.nonzero(moving)[0]
    for t in np.unique(st.target[idx]):
        kind = w.node_kind[t]
        if kind == "sinks":
            continue
        node = w.node_names[t]
        sel = idx[st.target[idx] == t]
        vals = w.field(node).values_at(st.pos[sel])
        for k in sel[vals == 0.0]:
            aid = int(st.ids[k])
            if kind == "escalators":
                es = st.escalators[node]
                st.held[k] = 1  # waits at the entry until admitted
                continue
            st.visited[aid].add(node)
            st.log(clock, "reach", aid, _fmt_detail(node=node))
            if st.action[k] == EVACUATING:
                _advance_evac(st, k)
            elif kind == "markers":
                _advance(st, k)
            elif kind == "delays":
                st.action[k] = DELAYED
                st.hold_until[k] = clock + sc.delays[node].delay.sample(st.rng)
                st.held[k] = 1
            elif kind == "queues":
                q = sc.queues[node]
                done = queue_admit(st.queues[node], aid, clock, q.service.sample(st.rng))
                st.action[k] = QUEUING
                st.hold_until[k] = done
                st.held[k] = 1
                st.log(clock, "queue_admit", aid, _fmt_detail(queue=node, completion=f"{done:.6f}"))
            elif kind == "waiting":
                if node in st.released:
                    _advance(st, k)
                else:
                    st.action[k] = WAITING
                    st.held[k] = 1
                    st.goal[k] = st.pos[k]
                    st.waiting_members[node].append(aid)
                    _fill_slots(st, node)
    # escalator admissions in id order
    for eid in sorted(st.escalators):
        t = w.node_index[eid]
        es = st.escalators[eid]
        link = sc.escalators[eid]
        for k in np.nonzero((st.target == t) & (st.held == 1) & (st.active == 1))[0]:
            if not es.can_admit(st.tick):
                break
            aid = int(st.ids[k])
            transit = int(math.ceil(link.transit_time / st.config.dt - 1e-9))
            es.admit(st.tick, aid, st.tick + transit)
            st.escalator_log[eid].append(clock)
            st.active[k] = 0
            st.held[k] = 0
            st.vel[k] = (0.0, 0.0)
            st.log(clock, "escalator_enter", aid, _fmt_detail(escalator=eid))


def _advance_evac(st: SimState, k: int):
    """An evacuating agent reached an intermediate node; head for the exit."""
    exit_ = _nearest_exit(st, k)
    if exit_ is None:
        st.target[k] = -1
        st.err[k] = 1
    else:
        _set_target(st, k, exit_)


# -- phase 4: desired velocity ---------------------------------------------

def _desired(st: SimState) -> np.ndarray:
    w = st.world
    n = st.n
    des = np.zeros((n, 2))
    if n == 0:
        return des
    frozen = st.alarm & (st.react_at > st.clock + EPS_T)
    base = (st.active == 1) & ~frozen
    nav = base & (st.target >= 0) & (st.held == 0) & ((st.action == WALKING) | (st.action == EVACUATING))
    idx = np.nonzero(nav)[0]
    if len(idx):
        keys = st.target[idx] * 2 + st.nav_time[idx]
        if keys.min() == keys.max():
            groups = [idx]
        else:
            order = np.argsort(keys, kind="stable")
            idx = idx[order]
            groups = np.split(idx, np.flatnonzero(np.diff(keys[order])) + 1)
        for group in groups:
            t = int(st.target[group[0]])
            node = w.node_names[t]
            f = w.qfields.get(node) if st.nav_time[group[0]] else None
            f = f or w.field(node)
            dirs, status = f.descend(st.pos[group])
            des[group] = dirs * (st.pref[group] * st.speed_mult[group])[:, None]
            bad = group[status == 2]
            for k in bad:
                if not st.err[k]:
                    st.err[k] = 1
                    st.log(st.clock, "routing_error", int(st.ids[k]), _fmt_detail(reason="unreachable", node=node))
    # goal steering for queue and waiting places
    for qid in sorted(st.queues):
        q = w.scenario.queues[qid]
        spacing = max(q.spacing, w.queue_spacing)
        for rank, (aid, _) in enumerate(st.queues[qid].waiting):
            k = st.slot_of(aid)
            st.goal[k] = _slot_point(q, rank, spacing)
    steer = base & ((st.action == QUEUING) | (st.action == WAITING)) & ~np.isnan(st.goal[:, 0])
    sidx = np.nonzero(steer)[0]
    if len(sidx):
        d = st.goal[sidx] - st.pos[sidx]
        dist = np.sqrt((d * d).sum(axis=1))
        sp = np.minimum(st.pref[sidx], dist / st.config.dt)
        with np.errstate(invalid="ignore", divide="ignore"):
            u = np.where(dist[:, None] > 1e-3, d / np.maximum(dist, 1e-12)[:, None], 0.0)
        des[sidx] = u * sp[:, None]
    # direction bias
    b = np.nonzero(st.bias_w > 0)[0]
    for k in b:
        s = math.hypot(*des[k])
        if s == 0:
            continue
        wgt = st.bias_w[k]
        vx = (1 - wgt) * des[k, 0] / s + wgt * st.bias[k, 0]
        vy = (1 - wgt) * des[k, 1] / s + wgt * st.bias[k, 1]
        nv = math.hypot(vx, vy)
        if nv > 0:
            des[k] = (vx / nv * s, vy / nv * s)
    # stairs
    for z in w.stairs:
        ins = np.nonzero(points_in_polygon(st.pos, z.polygon.vertices) & (np.abs(des).sum(axis=1) > 0))[0]
        for k in ins:
            des[k] *= z.factor(des[k])
    return des


def _slot_point(q, rank, spacing):
    if spacing == q.spacing:
        return q.slot_point(rank)
    return replace(q, spacing=spacing).slot_point(rank)


# -- phases 4-5: avoidance and commit ------------------------------------------

def _move(st: SimState, des: np.ndarray) -> None:
    n = st.n
    if n == 0:
        return
    cfg = st.config
    w = st.world
    be = kernels.backend()
    cell = 2 * w.rmax + w.vmax * cfg.dt
    h = build_hash(st.pos, max(cell, cfg.perception / 2), cfg.period)
    period = float(cfg.period[1]) if cfg.period is not None else 0.0
    mask = ((des[:, 0] != 0.0) | (des[:, 1] != 0.0)).astype(np.uint8)
    hargs = (h.order, h.starts, h.x0, h.y0, h.cell_w, h.cell_h, h.nx, h.ny, period)
    vel = be.avoid(st.pos, st.vel, st.radius, des, mask, st.active, *hargs, cfg.perception, cfg.tau, cfg.dt,
                   *kernels.candidate_table(), *kernels.wall_args(w.walls))
    new, moved = be.commit(st.pos, vel, st.radius, st.active, *hargs, cfg.dt)
    moved = moved.astype(bool)
    step = new - st.pos
    if cfg.period is not None:
        step[:, 0] -= period * np.floor(step[:, 0] / period + 0.5)
    st.dist_acc += np.sqrt((step * step).sum(axis=1))
    st.vel = np.where(moved[:, None], vel, 0.0)
    st.vel[st.active == 0] = 0.0
    st.pos = new
    _wrap(st)


# -- phase 6: sinks -------------------------------------------------------------

def _absorb(st: SimState) -> None:
    if st.n == 0:
        return
    w = st.world
    end = (st.tick + 1) * st.config.dt
    gone = np.zeros(st.n, dtype=bool)
    for sid in w.sink_ids:
        t = w.node_index[sid]
        sel = np.nonzero((st.target == t) & (st.active == 1))[0]
        if not len(sel):
            continue
        poly = w.scenario.sinks[sid].polygon
        hit = np.zeros(len(sel), dtype=bool)
        for r in np.unique(st.radius[sel]):
            m = st.radius[sel] == r
            hit[m] = _disc_overlaps(st.pos[sel[m]], float(r), poly)
        vals = w.field(sid).values_at(st.pos[sel])
        hit |= vals == 0.0
        for k in sel[hit]:
            aid = int(st.ids[k])
            st.visited[aid].add(sid)
            st.log(end, "exit", aid, _fmt_detail(sink=sid, time_in_system=f"{end - st.entered_at[k]:.6f}",
                                                  distance=f"{st.dist_acc[k]:.6f}"))
            st.visited.pop(aid, None)
            st.applied = {key for key in st.applied if key[0] != aid}
        gone[sel[hit]] = True
    n_gone = int(gone.sum())
    if n_gone:
        st.exited += n_gone
        st.last_exit = end
        st.keep(~gone)


# -- phase 7: monitors, trace, analyses -----------------------------------------

def _observe(st: SimState) -> None:
    w = st.world
    act = st.active == 1
    end_tick = st.tick + 1
    end = end_tick * st.config.dt
    if w.monitor_areas:
        st.monitors = compute_monitors(w.monitor_areas, st.pos[act])
    if st.spawned != st.exited + st.n:
        st.conservation_ok = False
    if st.trace is not None and end_tick % st.config.trace_every == 0:
        _trace_rows(st, end)
    every = st.config.auto_every or w.scenario.analyses.get("auto_every")
    if every:
        k = round(end / every)
        if k >= 1 and abs(end - k * every) < EPS_T * max(1.0, end):
            from .analysis import snapshot_analyses
            st.auto_rows.extend(snapshot_analyses(w.scenario, st, k * every))


def _trace_rows(st: SimState, end: float) -> None:
    w = st.world
    sel = np.nonzero(st.active == 1)[0]
    if not len(sel):
        return
    speed = np.sqrt((st.vel[sel] ** 2).sum(axis=1))
    tnames = w.type_names
    buf = []
    tick = st.tick
    for j, k in enumerate(sel):
        buf.append(f"{tick},{end:.6f},{st.ids[k]},{tnames[st.type_idx[k]]},{st.pos[k, 0]:.6f},{st.pos[k, 1]:.6f},"
                   f"{ACTIONS[st.action[k]]},{st.stage[k]},{speed[j]:.6f}\n")
    st.trace.write("".join(buf))


# -- stepping -------------------------------------------------------------

def step(st: SimState) -> SimState:
    cfg = st.config
    _spawn(st)
    if cfg.evacuation is not None and not st.alarm and st.clock >= cfg.evacuation.trigger_time - EPS_T:
        trigger_evacuation(st)
    _react(st)
    _zones(st)
    _bookkeeping(st)
    des = _desired(st)
    _move(st, des)
    _absorb(st)
    _observe(st)
    st.tick += 1
    return st


@dataclass
class RunResult:
    seed: int
    ticks: int
    summary: dict
    trace_csv: str | None
    events: list
    auto_rows: list
    out_dir: str | None = None
    error: str | None = None

    def events_csv(self) -> str:
        return events_to_csv(self.events)


def events_to_csv(events) -> str:
    buf = [EVENT_HEADER]
    for t, kind, subj, detail in events:
        buf.append(f"{t:.6f},{kind},{subj},{detail}\n")
    return "".join(buf)


def summarize(st: SimState) -> dict:
    s = {
        "spawned": st.spawned,
        "exited": st.exited,
        "alive": st.n,
        "conservation_ok": st.conservation_ok,
        "ticks": st.tick,
        "sim_time": st.clock,
        "backend": kernels.backend_name(),
        "deferred": len(st.deferred),
        "queues": {k: {"admitted": q.admitted, "served": q.served, "in_queue": q.in_queue,
                       "abandoned": q.abandoned} for k, q in st.queues.items()},
        "escalators": {k: e.total for k, e in st.escalators.items()},
    }
    if st.alarm:
        s["alarm_time"] = st.alarm_time
        done = st.n == 0
        # an alarm raised after the last exit finds nobody to evacuate: egress 0
        last = st.last_exit if st.last_exit is not None else st.alarm_time
        s["egress_time"] = max(0.0, last - st.alarm_time) if done else None
        s["evacuation_complete"] = done
    return s


def run(scenario: Scenario, config: SimConfig, out_dir=None, progress=None) -> RunResult:
    st = init_state(scenario, config)
    for _ in range(config.ticks):
        step(st)
        if progress is not None:
            progress(st)
    trace = st.trace.getvalue() if st.trace is not None else None
    res = RunResult(int(config.seed), st.tick, summarize(st), trace, st.events, st.auto_rows,
                    str(out_dir) if out_dir else None)
    if out_dir is not None:
        write_run(res, config, out_dir)
    return res


def write_run(res: RunResult, config: SimConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if res.trace_csv is not None:
        (out / "trace.csv").write_text(res.trace_csv, encoding="utf-8")
    (out / "events.csv").write_text(res.events_csv(), encoding="utf-8")
    if res.auto_rows:
        from .analysis import export_analysis
        (out / "auto_analysis.csv").write_text(export_analysis(res.auto_rows), encoding="utf-8")
    meta = {"dt": config.dt, "every": config.trace_every, "ticks": res.ticks, "seed": res.seed,
            "duration": config.duration, "summary": res.summary}
    (out / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- batches ----------------------------------------------------------------

def batch_configs(base: SimConfig, n: int, automatic: bool = True) -> list:
    return [replace(base, seed=base.seed + i) if automatic else base for i in range(n)]


def _run_one(args):
    scenario, config, out_dir = args
    try:
        return run(scenario, config, out_dir)
    except Exception as exc:  # isolate per-run failures
        return RunResult(int(config.seed), 0, {}, None, [], [], str(out_dir) if out_dir else None,
                         error=f"{type(exc).__name__}: {exc}")


def run_batch(scenario: Scenario, configs: list, out_dir=None, jobs: int | None = 1) -> list:
    if not configs:
        raise ConfigError("batch needs at least one configuration")
    dirs = [Path(out_dir) / f"run_{i + 1:04d}" if out_dir is not None else None for i in range(len(configs))]
    work = list(zip([scenario] * len(configs), configs, dirs))
    jobs = jobs or os.cpu_count() or 1
    if jobs <= 1 or len(configs) == 1:
        return [_run_one(w) for w in work]
    with ProcessPoolExecutor(max_workers=min(jobs, len(configs))) as ex:
        return list(ex.map(_run_one, work))
