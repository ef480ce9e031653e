"""2D environment model: obstacles organised in layers, CAD-style edits,
measuring tools and walkability queries.

Space is continuous and measured in meters.  An :class:`Environment` is an
immutable value; every edit returns a new one.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EPS = 1e-9
CIRCLE_SEGMENTS = 32


class GeometryError(ValueError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


def as_point(p) -> Point2:
    x, y = float(p[0]), float(p[1])
    if not (math.isfinite(x) and math.isfinite(y)):
        raise GeometryError(f"non-finite coordinate {p!r}")
    return Point2(x, y)


def _cross(ox, oy, ax, ay, bx, by):
    return (ax - ox) * (by - oy) - (ay - oy) * (bx - ox)


def segments_intersect(p1, p2, q1, q2, eps: float = EPS) -> bool:
    """Closed segment intersection test (touching counts)."""
    d1 = _cross(q1[0], q1[1], q2[0], q2[1], p1[0], p1[1])
    d2 = _cross(q1[0], q1[1], q2[0], q2[1], p2[0], p2[1])
    d3 = _cross(p1[0], p1[1], p2[0], p2[1], q1[0], q1[1])
    d4 = _cross(p1[0], p1[1], p2[0], p2[1], q2[0], q2[1])
    if ((d1 > eps and d2 < -eps) or (d1 < -eps and d2 > eps)) and (
        (d3 > eps and d4 < -eps) or (d3 < -eps and d4 > eps)
    ):
        return True
    return (
        point_segment_distance(p1, q1, q2) <= eps
        or point_segment_distance(p2, q1, q2) <= eps
        or point_segment_distance(q1, p1, p2) <= eps
        or point_segment_distance(q2, p1, p2) <= eps
    )


def point_segment_distance(p, a, b) -> float:
    ax, ay = a[0], a[1]
    dx, dy = b[0] - ax, b[1] - ay
    px, py = p[0] - ax, p[1] - ay
    ll = dx * dx + dy * dy
    if ll == 0.0:
        return math.hypot(px, py)
    t = (px * dx + py * dy) / ll
    t = min(1.0, max(0.0, t))
    return math.hypot(px - t * dx, py - t * dy)


def polygon_area(vertices: Sequence) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    n = len(vertices)
    s = 0.0
    for i in range(n):
        x1, y1 = vertices[i]
        x2, y2 = vertices[(i + 1) % n]
        s += x1 * y2 - x2 * y1
    return 0.5 * s


def point_in_polygon(p, vertices: Sequence) -> bool:
    """Even-odd containment with a closed boundary (points on an edge count)."""
    x, y = p[0], p[1]
    n = len(vertices)
    inside = False
    for i in range(n):
        ax, ay = vertices[i]
        bx, by = vertices[(i + 1) % n]
        if _on_segment(x, y, ax, ay, bx, by):
            return True
        if (ay > y) != (by > y):
            xi = ax + (y - ay) * (bx - ax) / (by - ay)
            if x < xi:
                inside = not inside
    return inside


def _on_segment(x, y, ax, ay, bx, by) -> bool:
    if _cross(ax, ay, bx, by, x, y) != 0.0:
        return False
    return min(ax, bx) <= x <= max(ax, bx) and min(ay, by) <= y <= max(ay, by)


def points_in_polygon(xy: np.ndarray, vertices: Sequence) -> np.ndarray:
    """Vectorised :func:`point_in_polygon` over an (N, 2) array."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    verts = np.asarray(vertices, dtype=float)
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    inbox = (xy[:, 0] >= lo[0]) & (xy[:, 0] <= hi[0]) & (xy[:, 1] >= lo[1]) & (xy[:, 1] <= hi[1])
    if len(xy) > 64 and inbox.sum() < len(xy):
        out = np.zeros(len(xy), dtype=bool)
        out[inbox] = points_in_polygon(xy[inbox], vertices)
        return out
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    boundary = np.zeros(len(xy), dtype=bool)
    n = len(verts)
    for i in range(n):
        ax, ay = verts[i]
        bx, by = verts[(i + 1) % n]
        cr = (bx - ax) * (y - ay) - (by - ay) * (x - ax)
        boundary |= (
            (cr == 0.0)
            & (x >= min(ax, bx)) & (x <= max(ax, bx))
            & (y >= min(ay, by)) & (y <= max(ay, by))
        )
        straddle = (ay > y) != (by > y)
        if ay != by:
            xi = ax + (y - ay) * (bx - ax) / (by - ay)
            inside ^= straddle & (x < xi)
    return inside | boundary


def polygon_is_simple(vertices: Sequence, eps: float = EPS) -> bool:
    n = len(vertices)
    if n < 3:
        return False
    for i in range(n):
        a1, a2 = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = vertices[j], vertices[(j + 1) % n]
            if segments_intersect(a1, a2, b1, b2, eps):
                return False
    return abs(polygon_area(vertices)) > eps


@dataclass(frozen=True)
class Polyline:
    vertices: tuple
    closed: bool = False

    def __post_init__(self):
        verts = tuple(as_point(v) for v in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 2:
            raise GeometryError("a polyline needs at least 2 vertices")
        for a, b in zip(verts, verts[1:]):
            if a == b:
                raise GeometryError(f"repeated consecutive vertex {a}")
        if self.closed:
            if len(verts) < 3:
                raise GeometryError("a closed polyline needs at least 3 vertices")
            if verts[0] == verts[-1]:
                raise GeometryError("closed polyline repeats its first vertex")
            if not polygon_is_simple(verts):
                raise GeometryError("closed polyline is not a simple polygon")

    def segments(self):
        v = self.vertices
        out = list(zip(v, v[1:]))
        if self.closed:
            out.append((v[-1], v[0]))
        return out

    @property
    def length(self) -> float:
        return sum(math.dist(a, b) for a, b in self.segments())

    @property
    def area(self) -> float:
        return abs(polygon_area(self.vertices)) if self.closed else 0.0

    @property
    def centroid(self) -> Point2:
        if self.closed:
            a = polygon_area(self.vertices)
            cx = cy = 0.0
            n = len(self.vertices)
            for i in range(n):
                x1, y1 = self.vertices[i]
                x2, y2 = self.vertices[(i + 1) % n]
                c = x1 * y2 - x2 * y1
                cx += (x1 + x2) * c
                cy += (y1 + y2) * c
            return Point2(cx / (6 * a), cy / (6 * a))
        xs = [v.x for v in self.vertices]
        ys = [v.y for v in self.vertices]
        return Point2(sum(xs) / len(xs), sum(ys) / len(ys))

    @property
    def bbox(self):
        xs = [v.x for v in self.vertices]
        ys = [v.y for v in self.vertices]
        return (min(xs), min(ys), max(xs), max(ys))

    def contains(self, p) -> bool:
        return self.closed and point_in_polygon(p, self.vertices)

    def distance(self, p) -> float:
        return min(point_segment_distance(p, a, b) for a, b in self.segments())


def polygon(vertices) -> Polyline:
    return Polyline(tuple(vertices), closed=True)


def rectangle(x0, y0, x1, y1) -> Polyline:
    return polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)])


def tessellate_circle(cx: float, cy: float, r: float) -> Polyline:
    if not r > 0:
        raise GeometryError("circle radius must be positive")
    step = 2.0 * math.pi / CIRCLE_SEGMENTS
    pts = [(cx + r * math.cos(k * step), cy + r * math.sin(k * step)) for k in range(CIRCLE_SEGMENTS)]
    return Polyline(tuple(pts), closed=True)


@dataclass(frozen=True)
class Layer:
    name: str
    obstacle_active: bool = True
    color: int = 7  # AutoCAD colour index


@dataclass(frozen=True)
class Obstacle:
    id: int
    shape: Polyline
    layer: str
    circle: tuple | None = None  # (cx, cy, r) when the shape is a tessellated circle

    @classmethod
    def make_circle(cls, id: int, cx: float, cy: float, r: float, layer: str) -> "Obstacle":
        return cls(id, tessellate_circle(cx, cy, r), layer, (float(cx), float(cy), float(r)))


@dataclass(frozen=True)
class Environment:
    layers: tuple = ()
    obstacles: tuple = ()

    def __post_init__(self):
        layers = tuple(self.layers)
        obstacles = tuple(self.obstacles)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "obstacles", obstacles)
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise GeometryError("layer names must be unique")
        ids = [o.id for o in obstacles]
        if len(set(ids)) != len(ids):
            raise GeometryError("obstacle ids must be unique")
        known = set(names)
        for o in obstacles:
            if o.layer not in known:
                raise GeometryError(f"obstacle {o.id} references unknown layer {o.layer!r}")

    @property
    def bbox(self):
        if not self.obstacles:
            return None
        boxes = [o.shape.bbox for o in self.obstacles]
        return (
            min(b[0] for b in boxes),
            min(b[1] for b in boxes),
            max(b[2] for b in boxes),
            max(b[3] for b in boxes),
        )

    def layer(self, name: str) -> Layer:
        for l in self.layers:
            if l.name == name:
                return l
        raise GeometryError(f"unknown layer {name!r}")

    def obstacle(self, oid: int) -> Obstacle:
        for o in self.obstacles:
            if o.id == oid:
                return o
        raise GeometryError(f"unknown obstacle id {oid}")

    def next_id(self) -> int:
        return max((o.id for o in self.obstacles), default=0) + 1

    def active_obstacles(self):
        active = {l.name for l in self.layers if l.obstacle_active}
        return [o for o in self.obstacles if o.layer in active]

    def with_layer(self, layer: Layer) -> "Environment":
        if any(l.name == layer.name for l in self.layers):
            layers = tuple(layer if l.name == layer.name else l for l in self.layers)
        else:
            layers = self.layers + (layer,)
        return Environment(layers, self.obstacles)

    def set_layer_active(self, name: str, active: bool) -> "Environment":
        return self.with_layer(replace(self.layer(name), obstacle_active=active))

    def set_layer_color(self, name: str, color: int) -> "Environment":
        return self.with_layer(replace(self.layer(name), color=int(color)))

    def add(self, shape: Polyline, layer: str = "0", circle=None) -> "Environment":
        env = self if any(l.name == layer for l in self.layers) else self.with_layer(Layer(layer))
        return Environment(env.layers, env.obstacles + (Obstacle(env.next_id(), shape, layer, circle),))

    def add_circle(self, cx, cy, r, layer: str = "0") -> "Environment":
        c = tessellate_circle(cx, cy, r)
        return self.add(c, layer, (float(cx), float(cy), float(r)))

    def walkable(self, p, radius: float = 0.0) -> bool:
        return walkable(self, p, radius)


def walkable(env: Environment, p, radius: float = 0.0) -> bool:
    """False inside a closed active obstacle, on an active segment, or closer
    than ``radius`` to one."""
    if radius < 0:
        raise GeometryError("radius must be non-negative")
    for o in env.active_obstacles():
        if o.shape.closed and point_in_polygon(p, o.shape.vertices):
            return False
        d = o.shape.distance(p)
        if d == 0.0 or d < radius:
            return False
    return True


# -- transforms -----------------------------------------------------------

@dataclass(frozen=True)
class Translate:
    dx: float
    dy: float


@dataclass(frozen=True)
class Rotate:
    angle_deg: float
    pivot: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class Scale:
    factor: float
    pivot: tuple | None = None  # None: centroid of the selection


@dataclass(frozen=True)
class Copy:
    dx: float = 0.0
    dy: float = 0.0
    layer: str | None = None


@dataclass(frozen=True)
class Delete:
    pass


@dataclass(frozen=True)
class MoveToLayer:
    layer: str


def _select(env: Environment, selection) -> list:
    if isinstance(selection, str):
        env.layer(selection)
        return [o for o in env.obstacles if o.layer == selection]
    ids = list(selection)
    known = {o.id for o in env.obstacles}
    missing = [i for i in ids if i not in known]
    if missing:
        raise GeometryError(f"unknown obstacle id(s) in selection: {missing}")
    wanted = set(ids)
    return [o for o in env.obstacles if o.id in wanted]


def _map_obstacle(o: Obstacle, fn, rscale: float = 1.0) -> Obstacle:
    if o.circle is not None:
        cx, cy = fn(o.circle[0], o.circle[1])
        r = o.circle[2] * rscale
        return Obstacle(o.id, tessellate_circle(cx, cy, r), o.layer, (cx, cy, r))
    verts = tuple(fn(v.x, v.y) for v in o.shape.vertices)
    return Obstacle(o.id, Polyline(verts, o.shape.closed), o.layer)


def transform(env: Environment, selection, op) -> Environment:
    """Apply a CAD edit to the selected obstacles (a layer name or ids)."""
    chosen = _select(env, selection)
    ids = {o.id for o in chosen}
    if isinstance(op, Delete):
        return Environment(env.layers, tuple(o for o in env.obstacles if o.id not in ids))
    if isinstance(op, Copy):
        target = env
        if op.layer is not None and not any(l.name == op.layer for l in env.layers):
            target = env.with_layer(Layer(op.layer))
        nid = env.next_id()
        fresh = []
        for o in chosen:
            moved = _map_obstacle(o, lambda x, y: (x + op.dx, y + op.dy))
            fresh.append(Obstacle(nid, moved.shape, op.layer or o.layer, moved.circle))
            nid += 1
        return Environment(target.layers, env.obstacles + tuple(fresh))
    if isinstance(op, MoveToLayer):
        target = env if any(l.name == op.layer for l in env.layers) else env.with_layer(Layer(op.layer))
        obs = tuple(replace(o, layer=op.layer) if o.id in ids else o for o in env.obstacles)
        return Environment(target.layers, obs)

    rscale = 1.0
    if isinstance(op, Translate):
        fn = lambda x, y: (x + op.dx, y + op.dy)
    elif isinstance(op, Rotate):
        a = math.radians(op.angle_deg)
        c, s = math.cos(a), math.sin(a)
        px, py = op.pivot
        fn = lambda x, y: (px + c * (x - px) - s * (y - py), py + s * (x - px) + c * (y - py))
    elif isinstance(op, Scale):
        if not op.factor > 0:
            raise GeometryError("scale factor must be positive")
        if op.pivot is None:
            px, py = _selection_centroid(chosen)
        else:
            px, py = op.pivot
        f = op.factor
        rscale = f
        fn = lambda x, y: (px + f * (x - px), py + f * (y - py))
    else:
        raise GeometryError(f"unknown transform {op!r}")
    obs = tuple(_map_obstacle(o, fn, rscale) if o.id in ids else o for o in env.obstacles)
    return Environment(env.layers, obs)


def _selection_centroid(chosen) -> tuple:
    if len(chosen) == 1 and chosen[0].shape.closed:
        return tuple(chosen[0].shape.centroid)
    pts = [v for o in chosen for v in o.shape.vertices]
    if not pts:
        return (0.0, 0.0)
    return (sum(p.x for p in pts) / len(pts), sum(p.y for p in pts) / len(pts))


def copy_across(src: Environment, selection, dst: Environment) -> Environment:
    """Paste the selected obstacles (and their layers) from one model into another."""
    chosen = _select(src, selection)
    out = dst
    for name in dict.fromkeys(o.layer for o in chosen):
        if not any(l.name == name for l in out.layers):
            out = out.with_layer(src.layer(name))
    nid = out.next_id()
    fresh = []
    for o in chosen:
        fresh.append(Obstacle(nid, o.shape, o.layer, o.circle))
        nid += 1
    return Environment(out.layers, out.obstacles + tuple(fresh))


def congruent(a: Environment, b: Environment) -> bool:
    """Same layers and same obstacle geometry, ignoring obstacle ids."""
    key = lambda o: (o.layer, o.shape.closed, o.shape.vertices, o.circle)
    return a.layers == b.layers and sorted(map(key, a.obstacles)) == sorted(map(key, b.obstacles))


# -- measuring ------------------------------------------------------------

def distance(a, b) -> float:
    return math.dist(as_point(a), as_point(b))


def angle(a, vertex, b) -> float:
    """Interior angle at ``vertex`` in degrees, in [0, 180]."""
    a, v, b = as_point(a), as_point(vertex), as_point(b)
    if a == v or b == v:
        raise GeometryError("angle needs two points distinct from the vertex")
    ux, uy = a.x - v.x, a.y - v.y
    wx, wy = b.x - v.x, b.y - v.y
    return math.degrees(math.atan2(abs(ux * wy - uy * wx), ux * wx + uy * wy))


def measure(env: Environment | None, kind: str, *points) -> float:
    if kind == "distance":
        return distance(*points)
    if kind == "angle":
        return angle(*points)
    raise GeometryError(f"unknown measure kind {kind!r}")


# -- fast wall queries ----------------------------------------------------

@dataclass
class WallIndex:
    """Active obstacle segments bucketed on a uniform grid.

    Every cell lists each segment whose distance to the cell is at most
    ``margin``, so looking up the cell of a point yields a superset of the
    segments within ``margin`` of it.
    """

    segs: np.ndarray  # (S, 4) x0 y0 x1 y1
    x0: float
    y0: float
    cell: float
    nx: int
    ny: int
    starts: np.ndarray
    items: np.ndarray
    margin: float
    polygons: list = field(default_factory=list)

    @classmethod
    def build(cls, env: Environment, margin: float = 1.0, cell: float = 1.0) -> "WallIndex":
        segs = []
        polys = []
        for o in env.active_obstacles():
            for a, b in o.shape.segments():
                segs.append((a.x, a.y, b.x, b.y))
            if o.shape.closed:
                polys.append(np.asarray(o.shape.vertices, dtype=float))
        segs = np.asarray(segs, dtype=np.float64).reshape(-1, 4)
        if len(segs) == 0:
            return cls(segs, 0.0, 0.0, cell, 1, 1, np.zeros(2, np.int64), np.zeros(0, np.int64), margin, polys)
        x0 = float(min(segs[:, 0].min(), segs[:, 2].min())) - margin - cell
        y0 = float(min(segs[:, 1].min(), segs[:, 3].min())) - margin - cell
        x1 = float(max(segs[:, 0].max(), segs[:, 2].max())) + margin + cell
        y1 = float(max(segs[:, 1].max(), segs[:, 3].max())) + margin + cell
        nx = max(1, int(math.ceil((x1 - x0) / cell)))
        ny = max(1, int(math.ceil((y1 - y0) / cell)))
        buckets = [[] for _ in range(nx * ny)]
        half = 0.5 * cell * math.sqrt(2.0)
        for k, (ax, ay, bx, by) in enumerate(segs):
            i0 = max(0, int((min(ax, bx) - margin - x0) // cell))
            i1 = min(nx - 1, int((max(ax, bx) + margin - x0) // cell))
            j0 = max(0, int((min(ay, by) - margin - y0) // cell))
            j1 = min(ny - 1, int((max(ay, by) + margin - y0) // cell))
            for j in range(j0, j1 + 1):
                cy = y0 + (j + 0.5) * cell
                for i in range(i0, i1 + 1):
                    cx = x0 + (i + 0.5) * cell
                    if point_segment_distance((cx, cy), (ax, ay), (bx, by)) <= margin + half:
                        buckets[j * nx + i].append(k)
        counts = np.array([len(b) for b in buckets], dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        items = np.array([k for b in buckets for k in b], dtype=np.int64)
        return cls(segs, x0, y0, cell, nx, ny, starts, items, margin, polys)

    def candidates(self, p) -> np.ndarray:
        if len(self.segs) == 0:
            return self.items
        i = int(math.floor((p[0] - self.x0) / self.cell))
        j = int(math.floor((p[1] - self.y0) / self.cell))
        if i < 0 or j < 0 or i >= self.nx or j >= self.ny:
            return self.items[:0]
        c = j * self.nx + i
        return self.items[self.starts[c]:self.starts[c + 1]]

    def clearance(self, p) -> float:
        """Distance to the nearest indexed segment, capped at ``margin``."""
        best = self.margin
        for k in self.candidates(p):
            ax, ay, bx, by = self.segs[k]
            best = min(best, point_segment_distance(p, (ax, ay), (bx, by)))
        return best

    def clear(self, p, radius: float) -> bool:
        """Vectorisable counterpart of :func:`walkable` for radius <= margin."""
        for poly in self.polygons:
            if point_in_polygon(p, poly):
                return False
        d = self.clearance(p)
        return not (d == 0.0 or d < radius)

    def arrays(self):
        return (self.segs, self.x0, self.y0, self.cell, self.nx, self.ny, self.starts, self.items)
