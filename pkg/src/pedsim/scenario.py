"""Routing and modelling objects, route choice, trigger evaluation, queue and
escalator bookkeeping, consistency validation and the scenario bundle.

Object ids are strings shared across all object kinds; ties are always broken
by the lowest id so that runs stay reproducible.
"""
from __future__ import annotations

import json
import math
import operator
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .agents import ACTIONS, DEFAULT_TYPES, PedestrianType, truncated_normal
from .demand import DemandSettings, ODMatrix, SupplyType
from .geometry import Environment, GeometryError, Layer, Obstacle, Polyline, points_in_polygon

RULES = ("percentage", "least_occupancy", "shortest_distance", "quickest_time")
FILL_RULES = ("uniform_random", "nearest_entry_first")
EFFECTS = ("speed_factor", "direction_bias", "set_type", "set_target")
PROFILES = ("uniform", "timetable", "poisson")
_OPS = {">": operator.gt, ">=": operator.ge, "<": operator.lt, "<=": operator.le, "==": operator.eq}


class ScenarioError(ValueError):
    pass


class RoutingError(RuntimeError):
    pass


def _poly(shape) -> Polyline:
    if isinstance(shape, Polyline):
        return shape
    return Polyline(tuple(tuple(map(float, v)) for v in shape), True)


def _line(shape) -> Polyline:
    if isinstance(shape, Polyline):
        return shape
    return Polyline(tuple(tuple(map(float, v)) for v in shape), False)


# -- distributions ---------------------------------------------------------

@dataclass(frozen=True)
class Dist:
    """Fixed value (sd == 0) or truncated normal on [lo, hi]."""
    mean: float
    sd: float = 0.0
    lo: float = 0.0
    hi: float = math.inf

    def __post_init__(self):
        if self.mean < 0 or self.lo < 0:
            raise ScenarioError("durations must be non-negative")
        if self.sd < 0 or self.lo > self.hi:
            raise ScenarioError("invalid distribution bounds")

    def sample(self, rng) -> float:
        if self.sd == 0:
            return min(self.hi, max(self.lo, self.mean))
        return truncated_normal(rng, self.mean, self.sd, self.lo, self.hi)

    @classmethod
    def of(cls, v) -> "Dist":
        if isinstance(v, Dist):
            return v
        if isinstance(v, dict):
            return cls(float(v["mean"]), float(v.get("sd", 0.0)), float(v.get("min", 0.0)),
                       float(v.get("max", math.inf)))
        return cls(float(v))

    def to_json(self):
        if self.sd == 0 and self.lo == 0 and self.hi == math.inf:
            return self.mean
        d = {"mean": self.mean, "sd": self.sd, "min": self.lo}
        if self.hi != math.inf:
            d["max"] = self.hi
        return d


# -- filters ---------------------------------------------------------------

@dataclass(frozen=True)
class PedFilter:
    """Conjunction of optional predicates; ``None`` means "any"."""
    types: frozenset | None = None
    destinations: frozenset | None = None
    visited: frozenset | None = None  # all listed nodes must have been visited
    actions: frozenset | None = None
    agent_ids: frozenset | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None and not isinstance(v, frozenset):
                object.__setattr__(self, f.name, frozenset(v))
        if self.actions is not None:
            bad = self.actions - set(ACTIONS)
            if bad:
                raise ScenarioError(f"unknown action(s) in filter: {sorted(bad)}")

    def matches(self, type_name, destination=None, visited=(), action="walking", agent_id=None, target=None) -> bool:
        if self.types is not None and type_name not in self.types:
            return False
        if self.destinations is not None and destination not in self.destinations and target not in self.destinations:
            return False
        if self.visited is not None and not self.visited <= set(visited):
            return False
        if self.actions is not None and action not in self.actions:
            return False
        if self.agent_ids is not None and agent_id not in self.agent_ids:
            return False
        return True

    def __and__(self, other: "PedFilter") -> "PedFilter":
        def meet(a, b, union=False):
            if a is None:
                return b
            if b is None:
                return a
            return a | b if union else a & b
        return PedFilter(meet(self.types, other.types), meet(self.destinations, other.destinations),
                         meet(self.visited, other.visited, union=True), meet(self.actions, other.actions),
                         meet(self.agent_ids, other.agent_ids))

    @property
    def empty(self) -> bool:
        return all(getattr(self, f.name) is None for f in fields(self))

    def to_json(self):
        return {f.name: sorted(getattr(self, f.name)) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_json(cls, d) -> "PedFilter":
        if d is None:
            return cls()
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ScenarioError(f"unknown filter field(s) {sorted(unknown)}")
        return cls(**{k: frozenset(v) for k, v in d.items()})


# -- objects ---------------------------------------------------------------

@dataclass(frozen=True)
class SourceArea:
    id: str
    polygon: Polyline
    profile: str = "uniform"
    poisson_seed: int | None = None
    supply: SupplyType | None = None

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))
        if self.profile not in PROFILES:
            raise ScenarioError(f"source {self.id}: unknown profile {self.profile!r}")
        if isinstance(self.supply, dict):
            object.__setattr__(self, "supply", SupplyType(self.id, tuple(self.supply.items())))
        elif self.supply is not None and self.supply.source != self.id:
            object.__setattr__(self, "supply", SupplyType(self.id, self.supply.mix))

    @property
    def policy(self):
        return ("poisson", self.poisson_seed) if self.profile == "poisson" else self.profile

    @property
    def mix(self) -> SupplyType:
        return self.supply or SupplyType(self.id, (("commuter", 100.0),))


@dataclass(frozen=True)
class SinkArea:
    id: str
    polygon: Polyline
    is_emergency_exit: bool = False
    default_exit: bool = False

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))


@dataclass(frozen=True)
class TargetMarker:
    id: str
    shape: Polyline  # closed polygon or open line

    def __post_init__(self):
        if not isinstance(self.shape, Polyline):
            raise ScenarioError(f"marker {self.id}: shape must be a Polyline")


@dataclass(frozen=True)
class WaitingArea:
    id: str
    polygon: Polyline
    fill_rule: str = "uniform_random"
    release_time: float | None = None
    release_event: str | None = None
    entry: tuple | None = None  # defaults to the first polygon vertex

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))
        if self.fill_rule not in FILL_RULES:
            raise ScenarioError(f"waiting area {self.id}: unknown fill rule {self.fill_rule!r}")
        if self.entry is not None:
            object.__setattr__(self, "entry", (float(self.entry[0]), float(self.entry[1])))

    @property
    def entry_point(self):
        return self.entry if self.entry is not None else tuple(self.polygon.vertices[0])

    def slots(self, spacing: float, clearance_ok=None) -> np.ndarray:
        """Lattice points inside the polygon, spaced ``spacing`` apart,
        ordered row by row (y, then x)."""
        x0, y0, x1, y1 = self.polygon.bbox
        xs = np.arange(x0 + spacing / 2, x1, spacing)
        ys = np.arange(y0 + spacing / 2, y1, spacing)
        if len(xs) == 0 or len(ys) == 0:
            return np.zeros((0, 2))
        gx, gy = np.meshgrid(xs, ys)
        pts = np.column_stack([gx.ravel(), gy.ravel()])
        pts = pts[points_in_polygon(pts, self.polygon.vertices)]
        if clearance_ok is not None and len(pts):
            pts = pts[np.array([clearance_ok(p) for p in pts], dtype=bool)]
        return pts


@dataclass(frozen=True)
class DelayArea:
    id: str
    polygon: Polyline
    delay: Dist = Dist(0.0)

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))
        object.__setattr__(self, "delay", Dist.of(self.delay))


@dataclass(frozen=True)
class QueueArea:
    id: str
    path: Polyline  # tail first, head last
    servers: int = 1
    service: Dist = Dist(5.0)
    spacing: float = 0.7
    discipline: str = "FIFO"

    def __post_init__(self):
        object.__setattr__(self, "path", _line(self.path))
        object.__setattr__(self, "service", Dist.of(self.service))
        if int(self.servers) < 1:
            raise ScenarioError(f"queue {self.id}: need at least one service point")
        if self.discipline != "FIFO":
            raise ScenarioError(f"queue {self.id}: only FIFO is supported")

    def slot_point(self, rank: int):
        """Position of the ``rank``-th waiting place counted back from the head."""
        verts = list(reversed(self.path.vertices))
        left = rank * self.spacing
        for a, b in zip(verts, verts[1:]):
            seg = math.hypot(b[0] - a[0], b[1] - a[1])
            if left <= seg:
                t = left / seg
                return (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
            left -= seg
        return tuple(verts[-1])


@dataclass(frozen=True)
class Condition:
    monitor: str
    metric: str = "occupancy"  # occupancy | density
    op: str = ">"
    value: float = 0.0

    def __post_init__(self):
        if self.metric not in ("occupancy", "density"):
            raise ScenarioError(f"unknown monitor metric {self.metric!r}")
        if self.op not in _OPS:
            raise ScenarioError(f"unknown comparison {self.op!r}")

    def holds(self, monitors) -> bool:
        m = monitors[self.monitor]
        reading = m[self.metric] if isinstance(m, dict) else m
        return _OPS[self.op](reading, self.value)


@dataclass(frozen=True)
class Effect:
    kind: str
    value: object = None  # factor | (ux, uy, weight) | type name | route/node id

    def __post_init__(self):
        if self.kind not in EFFECTS:
            raise ScenarioError(f"unknown effect {self.kind!r}")
        if self.kind == "speed_factor" and not float(self.value) > 0:
            raise ScenarioError("speed factor must be positive")
        if self.kind == "direction_bias":
            ux, uy, w = map(float, self.value)
            n = math.hypot(ux, uy)
            if n == 0 or not (0 <= w <= 1):
                raise ScenarioError("direction bias needs a non-zero vector and weight in [0, 1]")
            if abs(n - 1.0) > 1e-12:  # keep already-unit vectors bit-stable
                ux, uy = ux / n, uy / n
            object.__setattr__(self, "value", (ux, uy, w))


@dataclass(frozen=True)
class ModifierZone:
    id: str
    polygon: Polyline
    effect: Effect
    filter: PedFilter = PedFilter()
    schedule: tuple = ()  # ((start, end), ...) half-open; empty = always
    condition: Condition | None = None

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))
        object.__setattr__(self, "schedule", tuple((float(a), float(b)) for a, b in self.schedule))

    def active_at(self, clock: float) -> bool:
        return not self.schedule or any(a <= clock < b for a, b in self.schedule)


@dataclass(frozen=True)
class Stage:
    candidates: tuple
    rule: str = "percentage"
    weights: tuple | None = None  # percentages aligned with candidates

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        if not self.candidates:
            raise ScenarioError("route stage has no candidates")
        if self.rule not in RULES:
            raise ScenarioError(f"unknown choice rule {self.rule!r}")
        if self.weights is not None:
            w = self.weights
            if isinstance(w, dict):
                w = tuple(float(w[c]) for c in self.candidates)
            object.__setattr__(self, "weights", tuple(float(x) for x in w))
        elif self.rule == "percentage":
            object.__setattr__(self, "weights", tuple(100.0 / len(self.candidates) for _ in self.candidates))


@dataclass(frozen=True)
class RouteSpec:
    id: str
    stages: tuple

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if not self.stages:
            raise ScenarioError(f"route {self.id}: no stages")


@dataclass(frozen=True)
class StairZone:
    id: str
    polygon: Polyline
    speed_factor_up: float = 0.5
    speed_factor_down: float = 0.7
    width: float = 2.0
    up_direction: tuple = (1.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "polygon", _poly(self.polygon))
        for f in (self.speed_factor_up, self.speed_factor_down):
            if not (0 < f <= 1):
                raise ScenarioError(f"stair {self.id}: speed factors must lie in (0, 1]")
        if not self.width > 0:
            raise ScenarioError(f"stair {self.id}: width must be positive")
        ux, uy = map(float, self.up_direction)
        n = math.hypot(ux, uy)
        if n == 0:
            raise ScenarioError(f"stair {self.id}: up direction must be non-zero")
        if abs(n - 1.0) > 1e-12:
            ux, uy = ux / n, uy / n
        object.__setattr__(self, "up_direction", (ux, uy))

    def factor(self, direction) -> float:
        dot = direction[0] * self.up_direction[0] + direction[1] * self.up_direction[1]
        return self.speed_factor_up if dot >= 0 else self.speed_factor_down


@dataclass(frozen=True)
class EscalatorLink:
    id: str
    entry: Polyline
    exit: Polyline
    capacity_ppm: float = 60.0
    transit_time: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "entry", _line(self.entry))
        object.__setattr__(self, "exit", _line(self.exit))
        if not self.capacity_ppm > 0 or self.transit_time < 0:
            raise ScenarioError(f"escalator {self.id}: capacity must be positive, transit non-negative")

    @property
    def headway(self) -> float:
        return 60.0 / self.capacity_ppm


# -- scenario --------------------------------------------------------------

@dataclass
class Scenario:
    environment: Environment = field(default_factory=Environment)
    types: dict = field(default_factory=lambda: dict(DEFAULT_TYPES))
    routes: dict = field(default_factory=dict)
    sources: dict = field(default_factory=dict)
    sinks: dict = field(default_factory=dict)
    markers: dict = field(default_factory=dict)
    waiting: dict = field(default_factory=dict)
    delays: dict = field(default_factory=dict)
    queues: dict = field(default_factory=dict)
    zones: dict = field(default_factory=dict)
    stairs: dict = field(default_factory=dict)
    escalators: dict = field(default_factory=dict)
    demand: DemandSettings = field(default_factory=DemandSettings)
    analyses: dict = field(default_factory=dict)
    events: dict = field(default_factory=dict)  # name -> time
    config: dict = field(default_factory=dict)

    NODE_KINDS = ("markers", "waiting", "delays", "queues", "escalators", "sinks")

    def add(self, obj):
        kind = {SourceArea: "sources", SinkArea: "sinks", TargetMarker: "markers", WaitingArea: "waiting",
                DelayArea: "delays", QueueArea: "queues", ModifierZone: "zones", StairZone: "stairs",
                EscalatorLink: "escalators", RouteSpec: "routes"}[type(obj)]
        if obj.id in self.all_ids():
            raise ScenarioError(f"duplicate object id {obj.id!r}")
        getattr(self, kind)[obj.id] = obj
        return obj

    def all_ids(self):
        ids = set()
        for kind in ("routes", "sources", "sinks", "markers", "waiting", "delays", "queues", "zones",
                     "stairs", "escalators"):
            ids |= set(getattr(self, kind))
        return ids

    def node(self, node_id: str):
        for kind in self.NODE_KINDS:
            d = getattr(self, kind)
            if node_id in d:
                return kind, d[node_id]
        raise ScenarioError(f"unknown route node {node_id!r}")

    def node_shape(self, node_id: str) -> Polyline:
        kind, obj = self.node(node_id)
        if kind == "markers":
            return obj.shape
        if kind == "queues":
            return obj.path
        if kind == "escalators":
            return obj.entry
        return obj.polygon

    def node_ids(self):
        out = []
        for kind in self.NODE_KINDS:
            out.extend(getattr(self, kind))
        return sorted(out)

    def monitor_areas(self) -> dict:
        """Polygons readable by conditions: every polygonal object plus
        measurement areas from the analyses section."""
        areas = {}
        for kind in ("sources", "sinks", "waiting", "delays", "zones", "stairs"):
            for k, o in getattr(self, kind).items():
                areas[k] = o.polygon
        for k, o in self.markers.items():
            if o.shape.closed:
                areas[k] = o.shape
        for k, verts in self.analyses.get("areas", {}).items():
            areas[k] = _poly(verts)
        return areas

    def emergency_sinks(self):
        return sorted(k for k, s in self.sinks.items() if s.is_emergency_exit)

    def default_exit(self) -> str | None:
        marked = sorted(k for k, s in self.sinks.items() if s.is_emergency_exit and s.default_exit)
        if marked:
            return marked[0]
        em = self.emergency_sinks()
        return em[0] if em else None

    def bounds(self):
        """Bounding box of geometry and every placed object."""
        boxes = []
        if self.environment.bbox is not None:
            boxes.append(self.environment.bbox)
        for kind in ("sources", "sinks", "waiting", "delays", "zones", "stairs"):
            boxes += [o.polygon.bbox for o in getattr(self, kind).values()]
        boxes += [o.shape.bbox for o in self.markers.values()]
        boxes += [o.path.bbox for o in self.queues.values()]
        for e in self.escalators.values():
            boxes += [e.entry.bbox, e.exit.bbox]
        for verts in self.analyses.get("areas", {}).values():
            boxes.append(_poly(verts).bbox)
        for spec in self.analyses.get("lines", {}).values():
            boxes.append(_line(spec["vertices"]).bbox)
        if not boxes:
            return None
        return (min(b[0] for b in boxes), min(b[1] for b in boxes),
                max(b[2] for b in boxes), max(b[3] for b in boxes))


# -- route choice ----------------------------------------------------------

def choose_next(stage: Stage, monitors=None, rng=None, distance=None, travel_time=None, position=None) -> str:
    """Pick a node from a stage.

    ``monitors`` maps node id to occupancy (or a dict with "occupancy");
    ``distance(node, position)`` and ``travel_time(node, position)`` return
    navigation distance / time, +inf when unreachable.
    """
    cands = list(stage.candidates)
    if stage.rule == "percentage":
        if rng is None:
            raise RoutingError("percentage choice needs a random generator")
        u = float(rng.random()) * math.fsum(stage.weights)
        acc = 0.0
        for c, w in zip(cands, stage.weights):
            acc += w
            if u < acc:
                return c
        return [c for c, w in zip(cands, stage.weights) if w > 0][-1]
    if stage.rule == "least_occupancy":
        def occ(c):
            m = (monitors or {}).get(c, 0)
            return m["occupancy"] if isinstance(m, dict) else m
        return min(sorted(cands), key=occ)
    fn = distance if stage.rule == "shortest_distance" else travel_time
    if fn is None:
        raise RoutingError(f"{stage.rule} choice needs a distance function")
    scored = [(fn(c, position), c) for c in sorted(cands)]
    best = min(scored, key=lambda t: t[0])
    if not math.isfinite(best[0]):
        raise RoutingError(f"no reachable candidate among {sorted(cands)}")
    return best[1]


# -- triggers --------------------------------------------------------------

@dataclass(frozen=True)
class AgentView:
    id: int
    type: str
    position: tuple
    route: str | None = None
    target: str | None = None
    visited: frozenset = frozenset()
    action: str = "walking"


def evaluate_triggers(zones, agents, monitors, clock: float, applied: set) -> list:
    """(agent id, zone id, effect) for every agent inside a zone whose
    schedule, condition and filter hold now and that has not yet received
    the effect during its current stay.  ``applied`` holds (agent, zone)
    pairs and is updated in place: pairs are added on application and
    dropped once the agent leaves the zone."""
    out = []
    zones = [zones[k] for k in sorted(zones)] if isinstance(zones, dict) else sorted(zones, key=lambda z: z.id)
    agents = sorted(agents, key=lambda a: a.id)
    if not agents:
        return out
    xy = np.array([a.position for a in agents], dtype=float).reshape(-1, 2)
    for z in zones:
        inside = points_in_polygon(xy, z.polygon.vertices)
        gate = z.active_at(clock) and (z.condition is None or z.condition.holds(monitors))
        for a, ins in zip(agents, inside):
            key = (a.id, z.id)
            if not ins:
                applied.discard(key)
                continue
            if key in applied or not gate:
                continue
            if not z.filter.matches(a.type, a.route, a.visited, a.action, a.id, a.target):
                continue
            applied.add(key)
            out.append((a.id, z.id, z.effect))
    out.sort(key=lambda t: (t[0], t[1]))
    return out


# -- queues ----------------------------------------------------------------

@dataclass
class QueueState:
    """FIFO multi-server queue: completion = max(arrival, server free) + service."""
    servers: int = 1
    free_at: list = field(default_factory=list)
    waiting: deque = field(default_factory=deque)  # (agent, completion) in FIFO order
    admitted: int = 0
    served: int = 0
    abandoned: int = 0
    log: list = field(default_factory=list)

    def __post_init__(self):
        if not self.free_at:
            self.free_at = [-math.inf] * int(self.servers)

    @property
    def in_queue(self) -> int:
        return len(self.waiting)

    def conserved(self) -> bool:
        return self.admitted == self.served + self.in_queue + self.abandoned


def queue_admit(q: QueueState, agent, clock: float, service: float) -> float:
    """Admit ``agent`` at ``clock``; returns its service completion time."""
    k = min(range(len(q.free_at)), key=lambda i: (q.free_at[i], i))
    start = max(clock, q.free_at[k])
    done = start + service
    q.free_at[k] = done
    q.waiting.append((agent, done))
    q.admitted += 1
    q.log.append(("admit", agent, clock, done))
    return done


def queue_serve(q: QueueState, clock: float) -> list:
    """Release agents whose service has completed by ``clock``, in FIFO
    order; returns [(agent, completion)]."""
    out = []
    while q.waiting and q.waiting[0][1] <= clock + 1e-9:
        agent, done = q.waiting.popleft()
        q.served += 1
        q.log.append(("serve", agent, done, done))
        out.append((agent, done))
    return out


def queue_abandon(q: QueueState, agent) -> bool:
    for i, (a, _) in enumerate(q.waiting):
        if a == agent:
            del q.waiting[i]
            q.abandoned += 1
            return True
    return False


@dataclass
class EscalatorState:
    """Admission control keeping every half-open window of ``window`` ticks at
    or below capacity; admissions are also spaced by the headway."""
    capacity_per_window: int
    window_ticks: int
    headway_ticks: int
    admitted_ticks: deque = field(default_factory=deque)
    in_transit: list = field(default_factory=list)  # (exit tick, agent)
    total: int = 0

    @classmethod
    def for_link(cls, link: EscalatorLink, dt: float) -> "EscalatorState":
        window = int(round(60.0 / dt))
        headway = int(math.ceil(link.headway / dt - 1e-9))
        return cls(int(math.floor(link.capacity_ppm + 1e-9)), window, max(1, headway))

    def can_admit(self, tick: int) -> bool:
        while self.admitted_ticks and self.admitted_ticks[0] <= tick - self.window_ticks:
            self.admitted_ticks.popleft()
        if len(self.admitted_ticks) >= self.capacity_per_window:
            return False
        return not self.admitted_ticks or tick - self.admitted_ticks[-1] >= self.headway_ticks

    def admit(self, tick: int, agent, exit_tick: int) -> None:
        self.admitted_ticks.append(tick)
        self.in_transit.append((exit_tick, agent))
        self.total += 1


# -- monitors --------------------------------------------------------------

def compute_monitors(areas: dict, xy: np.ndarray) -> dict:
    out = {}
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    for k in sorted(areas):
        poly = areas[k]
        n = int(points_in_polygon(xy, poly.vertices).sum()) if len(xy) else 0
        out[k] = {"occupancy": n, "density": n / poly.area if poly.area > 0 else 0.0}
    return out


# -- validation ------------------------------------------------------------

@dataclass
class ValidationReport:
    errors: list = field(default_factory=list)  # (object id, message)
    warnings: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors

    def error(self, oid, msg):
        self.errors.append((oid, msg))

    def warn(self, oid, msg):
        self.warnings.append((oid, msg))

    def lines(self):
        out = [f"ERROR {oid}: {m}" for oid, m in self.errors]
        out += [f"WARNING {oid}: {m}" for oid, m in self.warnings]
        out.append(f"{len(self.errors)} error(s), {len(self.warnings)} warning(s)")
        return out

    def to_csv(self) -> str:
        rows = ["severity,object,message"]
        for sev, items in (("error", self.errors), ("warning", self.warnings)):
            for oid, m in items:
                rows.append(f"{sev},{oid},\"{m}\"")
        return "\n".join(rows) + "\n"


def validate_scenario(scenario: Scenario, env: Environment | None = None, demand: ODMatrix | None = None,
                      nav_cell: float | None = None) -> ValidationReport:
    from .navfield import NavError, build_grid, build_nav_field, target_cells  # avoid import cycle

    rep = ValidationReport()
    env = env if env is not None else scenario.environment
    if demand is None:
        try:
            demand = scenario.demand.current()
        except Exception as exc:
            rep.error("demand", str(exc))
            demand = ODMatrix()
    # demand / sources / routes
    for b in demand.bins:
        if b.origin not in scenario.sources:
            rep.error(b.origin, "demand origin is not a source")
        if b.destination not in scenario.routes:
            rep.error(b.origin, f"demand destination {b.destination!r} is not a route")
    routed = {b.origin for b in demand.bins}
    for sid, src in sorted(scenario.sources.items()):
        if sid not in routed:
            rep.error(sid, "source has no route (no demand rows)")
        mix = src.mix
        for p in mix.problems():
            rep.error(sid, p)
        for name, _ in mix.mix:
            if name not in scenario.types:
                rep.error(sid, f"supply references undefined pedestrian type {name!r}")
    for rid, route in sorted(scenario.routes.items()):
        for i, st in enumerate(route.stages):
            for c in st.candidates:
                try:
                    scenario.node(c)
                except ScenarioError:
                    rep.error(rid, f"stage {i}: unknown node {c!r}")
            if st.rule == "percentage" and abs(math.fsum(st.weights) - 100.0) > 1e-9:
                rep.error(rid, f"stage {i}: percentages sum to {math.fsum(st.weights):g}")
        if not all(c in scenario.sinks for c in route.stages[-1].candidates):
            rep.error(rid, "final stage must contain only sinks")
    # zones
    areas = scenario.monitor_areas()
    for zid, z in sorted(scenario.zones.items()):
        if z.condition is not None and z.condition.monitor not in areas:
            rep.error(zid, f"condition references unknown monitor {z.condition.monitor!r}")
        if z.effect.kind == "set_type" and z.effect.value not in scenario.types:
            rep.error(zid, f"set_type references undefined type {z.effect.value!r}")
        if z.effect.kind == "set_target" and z.effect.value not in scenario.routes:
            try:
                scenario.node(z.effect.value)
            except ScenarioError:
                rep.error(zid, f"set_target references unknown node or route {z.effect.value!r}")
    for wid, w in sorted(scenario.waiting.items()):
        if w.release_event is not None and w.release_event not in scenario.events and w.release_event != "alarm":
            rep.error(wid, f"release event {w.release_event!r} is not defined")
    if scenario.config.get("evacuation") and not scenario.emergency_sinks():
        rep.error("evacuation", "no emergency exit sink defined")
    if rep.errors:
        return rep
    # reachability over the navigation grid
    bounds = scenario.bounds()
    if bounds is None:
        return rep
    cell = nav_cell or scenario.config.get("nav_cell", 0.25)
    try:
        grid = build_grid(env, bounds, cell, scenario.config.get("nav_clearance", 0.2))
    except NavError as exc:
        rep.error("geometry", str(exc))
        return rep
    fields_ = {}

    def field_for(node):
        if node not in fields_:
            try:
                fields_[node] = build_nav_field(None, scenario.node_shape(node), node, grid=grid)
            except NavError as exc:
                rep.error(node, str(exc))
                fields_[node] = None
        return fields_[node]

    def reachable_from(node, cells):
        f = field_for(node)
        return f is not None and bool(np.isfinite(f.dist.ravel()[cells]).any())

    for sid, src in sorted(scenario.sources.items()):
        try:
            cells = target_cells(grid, src.polygon)
        except NavError:
            rep.error(sid, "source area is not walkable")
            continue
        for rid in sorted({b.destination for b in demand.bins if b.origin == sid}):
            prev = [cells]
            for i, st in enumerate(scenario.routes[rid].stages):
                nxt = []
                for c in st.candidates:
                    ok = any(reachable_from(c, p) for p in prev)
                    if not ok:
                        rep.error(rid, f"unreachable stage {i} (node {c}) from source {sid}")
                    else:
                        kind, obj = scenario.node(c)
                        exit_shape = obj.exit if kind == "escalators" else scenario.node_shape(c)
                        try:
                            nxt.append(target_cells(grid, exit_shape))
                        except NavError:
                            pass
                prev = nxt or prev
    return rep


# -- bundle (JSON) ---------------------------------------------------------

def _verts(p: Polyline):
    return [[v.x, v.y] for v in p.vertices]


def _env_to_json(env: Environment):
    return {
        "layers": [{"name": l.name, "obstacle_active": l.obstacle_active, "color": l.color} for l in env.layers],
        "obstacles": [
            {"id": o.id, "layer": o.layer, "closed": o.shape.closed, "vertices": _verts(o.shape),
             **({"circle": list(o.circle)} if o.circle is not None else {})}
            for o in env.obstacles
        ],
    }


def _env_from_json(d) -> Environment:
    layers = tuple(Layer(l["name"], bool(l.get("obstacle_active", True)), int(l.get("color", 7)))
                   for l in d.get("layers", []))
    obs = []
    for o in d.get("obstacles", []):
        shape = Polyline(tuple(tuple(map(float, v)) for v in o["vertices"]), bool(o.get("closed", False)))
        circ = tuple(map(float, o["circle"])) if o.get("circle") is not None else None
        obs.append(Obstacle(int(o["id"]), shape, o["layer"], circ))
    return Environment(layers, tuple(obs))


def _type_to_json(t: PedestrianType):
    return {"speed_mean": t.speed_mean, "speed_sd": t.speed_sd, "speed_min": t.speed_min, "speed_max": t.speed_max,
            "radius": t.radius, "luggage_factor": t.luggage_factor, "prm": t.prm, "familiarity": t.familiarity}


def _shape_json(p: Polyline):
    return {"vertices": _verts(p), "closed": p.closed}


def _shape_from(d) -> Polyline:
    return Polyline(tuple(tuple(map(float, v)) for v in d["vertices"]), bool(d.get("closed", True)))


def scenario_to_dict(sc: Scenario) -> dict:
    objects = {
        "sources": [{"id": s.id, "polygon": _verts(s.polygon), "profile": s.profile, "poisson_seed": s.poisson_seed,
                     **({"supply": [[k, v] for k, v in s.supply.mix]} if s.supply is not None else {})}
                    for s in sc.sources.values()],
        "sinks": [{"id": s.id, "polygon": _verts(s.polygon), "is_emergency_exit": s.is_emergency_exit,
                   "default_exit": s.default_exit} for s in sc.sinks.values()],
        "markers": [{"id": m.id, "shape": _shape_json(m.shape)} for m in sc.markers.values()],
        "waiting": [{"id": w.id, "polygon": _verts(w.polygon), "fill_rule": w.fill_rule,
                     "release_time": w.release_time, "release_event": w.release_event,
                     "entry": list(w.entry) if w.entry is not None else None} for w in sc.waiting.values()],
        "delays": [{"id": d.id, "polygon": _verts(d.polygon), "delay": d.delay.to_json()} for d in sc.delays.values()],
        "queues": [{"id": q.id, "path": _verts(q.path), "servers": q.servers, "service": q.service.to_json(),
                    "spacing": q.spacing} for q in sc.queues.values()],
        "zones": [{"id": z.id, "polygon": _verts(z.polygon),
                   "effect": {"kind": z.effect.kind, "value": list(z.effect.value)
                              if isinstance(z.effect.value, tuple) else z.effect.value},
                   "filter": z.filter.to_json(), "schedule": [list(s) for s in z.schedule],
                   "condition": None if z.condition is None else
                   {"monitor": z.condition.monitor, "metric": z.condition.metric, "op": z.condition.op,
                    "value": z.condition.value}} for z in sc.zones.values()],
        "stairs": [{"id": s.id, "polygon": _verts(s.polygon), "speed_factor_up": s.speed_factor_up,
                    "speed_factor_down": s.speed_factor_down, "width": s.width,
                    "up_direction": list(s.up_direction)} for s in sc.stairs.values()],
        "escalators": [{"id": e.id, "entry": _verts(e.entry), "exit": _verts(e.exit), "capacity_ppm": e.capacity_ppm,
                        "transit_time": e.transit_time} for e in sc.escalators.values()],
    }
    return {
        "geometry": _env_to_json(sc.environment),
        "pedestrian_types": {k: _type_to_json(t) for k, t in sc.types.items()},
        "routes": [{"id": r.id, "stages": [{"candidates": list(s.candidates), "rule": s.rule,
                                            **({"weights": list(s.weights)} if s.weights is not None else {})}
                                           for s in r.stages]} for r in sc.routes.values()],
        "objects": objects,
        "demand_settings": {"active": sc.demand.active,
                            "settings": {k: m.to_rows() for k, m in sc.demand.settings.items()}},
        "analyses": sc.analyses,
        "events": sc.events,
        "config": sc.config,
    }


def scenario_from_dict(d: dict) -> Scenario:
    try:
        sc = Scenario(environment=_env_from_json(d.get("geometry", {})))
        if "pedestrian_types" in d:
            sc.types = {k: PedestrianType(k, **v) for k, v in d["pedestrian_types"].items()}
        o = d.get("objects", {})
        for s in o.get("sources", []):
            sup = s.get("supply")
            sc.add(SourceArea(s["id"], _poly(s["polygon"]), s.get("profile", "uniform"), s.get("poisson_seed"),
                              SupplyType(s["id"], tuple((k, float(v)) for k, v in sup)) if sup is not None else None))
        for s in o.get("sinks", []):
            sc.add(SinkArea(s["id"], _poly(s["polygon"]), bool(s.get("is_emergency_exit", False)),
                            bool(s.get("default_exit", False))))
        for m in o.get("markers", []):
            sc.add(TargetMarker(m["id"], _shape_from(m["shape"])))
        for w in o.get("waiting", []):
            sc.add(WaitingArea(w["id"], _poly(w["polygon"]), w.get("fill_rule", "uniform_random"),
                               w.get("release_time"), w.get("release_event"), w.get("entry")))
        for x in o.get("delays", []):
            sc.add(DelayArea(x["id"], _poly(x["polygon"]), Dist.of(x.get("delay", 0.0))))
        for q in o.get("queues", []):
            sc.add(QueueArea(q["id"], _line(q["path"]), int(q.get("servers", 1)), Dist.of(q.get("service", 5.0)),
                             float(q.get("spacing", 0.7))))
        for z in o.get("zones", []):
            e = z["effect"]
            val = tuple(e["value"]) if isinstance(e.get("value"), list) else e.get("value")
            c = z.get("condition")
            sc.add(ModifierZone(z["id"], _poly(z["polygon"]), Effect(e["kind"], val),
                                PedFilter.from_json(z.get("filter")), tuple(tuple(s) for s in z.get("schedule", [])),
                                None if c is None else Condition(c["monitor"], c.get("metric", "occupancy"),
                                                                 c.get("op", ">"), float(c.get("value", 0)))))
        for s in o.get("stairs", []):
            sc.add(StairZone(s["id"], _poly(s["polygon"]), float(s.get("speed_factor_up", 0.5)),
                             float(s.get("speed_factor_down", 0.7)), float(s.get("width", 2.0)),
                             tuple(s.get("up_direction", (1.0, 0.0)))))
        for e in o.get("escalators", []):
            sc.add(EscalatorLink(e["id"], _line(e["entry"]), _line(e["exit"]), float(e.get("capacity_ppm", 60)),
                                 float(e.get("transit_time", 20))))
        for r in d.get("routes", []):
            sc.add(RouteSpec(r["id"], tuple(Stage(tuple(s["candidates"]), s.get("rule", "percentage"),
                                                  tuple(s["weights"]) if "weights" in s else None)
                                            for s in r["stages"])))
        ds = d.get("demand_settings", {})
        demand = DemandSettings()
        for name, rows in ds.get("settings", {}).items():
            demand.settings[name] = ODMatrix.from_rows(rows)
        demand.active = ds.get("active")
        sc.demand = demand
        sc.analyses = d.get("analyses", {})
        sc.events = {k: float(v) for k, v in d.get("events", {}).items()}
        sc.config = d.get("config", {})
    except (KeyError, TypeError) as exc:
        raise ScenarioError(f"malformed scenario bundle: missing or invalid field {exc}") from None
    except GeometryError as exc:
        raise ScenarioError(f"invalid geometry in bundle: {exc}") from None
    return sc


def dump_bundle(sc: Scenario) -> str:
    return json.dumps(scenario_to_dict(sc), indent=1, sort_keys=False, allow_nan=True) + "\n"


def load_bundle(source) -> Scenario:
    """Parse a bundle from JSON text or a path."""
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        source = Path(source).read_text(encoding="utf-8")
    try:
        data = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"bundle is not valid JSON: {exc}") from None
    return scenario_from_dict(data)
