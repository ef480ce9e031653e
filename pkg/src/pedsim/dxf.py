"""ASCII DXF subset: LINE, LWPOLYLINE and CIRCLE entities on named layers.

Units are meters at 1:1.  The LAYER table is read when present; frozen layers
(flag bit 1) come in with ``obstacle_active=False``.  Entity handles (group
code 5) carry obstacle ids so that an exported file re-imports identically.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

from .geometry import Environment, GeometryError, Layer, Obstacle, Polyline, tessellate_circle


class DXFError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class DXFResult:
    environment: Environment
    warnings: list = field(default_factory=list)
    skipped: Counter = field(default_factory=Counter)


def _pairs(text: str):
    lines = text.splitlines()
    if lines and lines[-1].strip() == "" and len(lines) % 2 == 1:
        lines = lines[:-1]
    if len(lines) % 2:
        raise DXFError(len(lines), "odd number of lines; group codes and values must pair up")
    out = []
    for i in range(0, len(lines), 2):
        raw = lines[i].strip()
        try:
            code = int(raw)
        except ValueError:
            raise DXFError(i + 1, f"non-numeric group code {raw!r}") from None
        out.append((code, lines[i + 1].strip(), i + 1))
    return out


def _sections(pairs):
    """Yield (section name, list of pairs) for each SECTION...ENDSEC block."""
    i = 0
    n = len(pairs)
    while i < n:
        code, value, _ = pairs[i]
        if code == 0 and value == "SECTION":
            name = pairs[i + 1][1] if i + 1 < n and pairs[i + 1][0] == 2 else ""
            j = i + 2
            body = []
            while j < n and not (pairs[j][0] == 0 and pairs[j][1] == "ENDSEC"):
                body.append(pairs[j])
                j += 1
            yield name, body
            i = j + 1
        else:
            i += 1


def _records(body):
    """Split a section body into records that each start at a code-0 pair."""
    rec = None
    for code, value, line in body:
        if code == 0:
            if rec is not None:
                yield rec
            rec = [(code, value, line)]
        elif rec is not None:
            rec.append((code, value, line))
    if rec is not None:
        yield rec


def _float(value, line):
    try:
        return float(value)
    except ValueError:
        raise DXFError(line, f"expected a number, got {value!r}") from None


def parse_dxf_subset(text: str) -> DXFResult:
    pairs = _pairs(text)
    layers: dict[str, Layer] = {}
    entities = None
    for name, body in _sections(pairs):
        if name == "TABLES":
            for rec in _records(body):
                if rec[0][1] != "LAYER":
                    continue
                lname, flags, color = None, 0, 7
                for code, value, line in rec[1:]:
                    if code == 2:
                        lname = value
                    elif code == 70:
                        flags = int(_float(value, line))
                    elif code == 62:
                        color = int(_float(value, line))
                if lname is not None:
                    layers[lname] = Layer(lname, obstacle_active=not (flags & 1), color=abs(color))
        elif name == "ENTITIES":
            entities = body
    if entities is None:
        raise DXFError(len(pairs) * 2, "no ENTITIES section")

    warnings = []
    skipped = Counter()
    raw = []
    for rec in _records(entities):
        etype = rec[0][1]
        line0 = rec[0][2]
        attrs = rec[1:]
        layer = "0"
        handle = None
        for code, value, _ in attrs:
            if code == 8:
                layer = value
            elif code == 5:
                handle = value
        try:
            if etype == "LINE":
                vals = {c: _float(v, l) for c, v, l in attrs if c in (10, 20, 11, 21)}
                shape = Polyline(((vals[10], vals[20]), (vals[11], vals[21])))
                raw.append((handle, shape, layer, None))
            elif etype == "LWPOLYLINE":
                verts, flag, count = [], 0, None
                for c, v, l in attrs:
                    if c == 10:
                        verts.append([_float(v, l), None])
                    elif c == 20 and verts:
                        verts[-1][1] = _float(v, l)
                    elif c == 70:
                        flag = int(_float(v, l))
                    elif c == 90:
                        count = int(_float(v, l))
                if count is not None and count != len(verts):
                    warnings.append(f"line {line0}: LWPOLYLINE declares {count} vertices, found {len(verts)}")
                closed = bool(flag & 1)
                pts = []
                for x, y in verts:
                    if y is None:
                        raise DXFError(line0, "LWPOLYLINE vertex without y (20) value")
                    if not pts or pts[-1] != (x, y):
                        pts.append((x, y))
                if closed and len(pts) > 1 and pts[0] == pts[-1]:
                    pts.pop()
                raw.append((handle, Polyline(tuple(pts), closed), layer, None))
            elif etype == "CIRCLE":
                vals = {c: _float(v, l) for c, v, l in attrs if c in (10, 20, 40)}
                cx, cy, r = vals[10], vals[20], vals[40]
                raw.append((handle, tessellate_circle(cx, cy, r), layer, (cx, cy, r)))
            else:
                skipped[etype] += 1
        except KeyError as exc:
            raise DXFError(line0, f"{etype} is missing group code {exc.args[0]}") from None
        except GeometryError as exc:
            warnings.append(f"line {line0}: skipped invalid {etype} ({exc})")
            skipped[etype] += 1

    for etype in sorted(skipped):
        if not any(w.endswith(f"invalid {etype}") for w in warnings):
            warnings.append(f"skipped {etype}")

    for _, _, lname, _ in raw:
        if lname not in layers:
            layers[lname] = Layer(lname)

    handles = [h for h, *_ in raw]
    use_handles = all(h is not None for h in handles)
    if use_handles:
        try:
            ids = [int(h, 16) for h in handles]
        except ValueError:
            use_handles = False
        else:
            use_handles = len(set(ids)) == len(ids)
    if not use_handles:
        ids = list(range(1, len(raw) + 1))
    obstacles = tuple(Obstacle(i, shape, lname, circ) for i, (_, shape, lname, circ) in zip(ids, raw))
    return DXFResult(Environment(tuple(layers.values()), obstacles), warnings, skipped)


def _tag(code: int, value) -> str:
    if isinstance(value, float):
        value = repr(value)
    return f"{code:>3}\n{value}\n"


def export_dxf_subset(env: Environment) -> str:
    out = []
    out.append(_tag(0, "SECTION") + _tag(2, "TABLES"))
    out.append(_tag(0, "TABLE") + _tag(2, "LAYER") + _tag(70, len(env.layers)))
    for layer in env.layers:
        flags = 0 if layer.obstacle_active else 1
        out.append(_tag(0, "LAYER") + _tag(2, layer.name) + _tag(70, flags) + _tag(62, layer.color))
    out.append(_tag(0, "ENDTAB") + _tag(0, "ENDSEC"))
    out.append(_tag(0, "SECTION") + _tag(2, "ENTITIES"))
    for o in env.obstacles:
        head = _tag(5, format(o.id, "X")) + _tag(8, o.layer)
        if o.circle is not None:
            cx, cy, r = o.circle
            out.append(_tag(0, "CIRCLE") + head + _tag(10, float(cx)) + _tag(20, float(cy)) + _tag(40, float(r)))
        elif len(o.shape.vertices) == 2 and not o.shape.closed:
            (ax, ay), (bx, by) = o.shape.vertices
            out.append(_tag(0, "LINE") + head + _tag(10, ax) + _tag(20, ay) + _tag(11, bx) + _tag(21, by))
        else:
            rec = [_tag(0, "LWPOLYLINE"), head, _tag(90, len(o.shape.vertices)), _tag(70, 1 if o.shape.closed else 0)]
            for v in o.shape.vertices:
                rec.append(_tag(10, v.x) + _tag(20, v.y))
            out.append("".join(rec))
    out.append(_tag(0, "ENDSEC") + _tag(0, "EOF"))
    return "".join(out)
