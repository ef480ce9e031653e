import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from pedsim.dxf import DXFError, export_dxf_subset, parse_dxf_subset
from pedsim.geometry import Environment, GeometryError, Layer, Polyline, polygon


def dxf(*entities):
    body = "".join(entities)
    return f"  0\nSECTION\n  2\nENTITIES\n{body}  0\nENDSEC\n  0\nEOF\n"


LINE = "  0\nLINE\n  8\nWALLS\n 10\n0.0\n 20\n0.0\n 11\n10.0\n 21\n0.0\n"
SQUARE = ("  0\nLWPOLYLINE\n  8\nA\n 90\n4\n 70\n1\n"
          " 10\n0\n 20\n0\n 10\n1\n 20\n0\n 10\n1\n 20\n1\n 10\n0\n 20\n1\n")
SPLINE = "  0\nSPLINE\n  8\nWALLS\n 10\n0.0\n 20\n0.0\n"


def test_dxf_lines_become_obstacles():
    res = parse_dxf_subset(dxf(LINE))
    (o,) = res.environment.obstacles
    assert not o.shape.closed and o.shape.length == 10.0 and o.layer == "WALLS"
    assert res.environment.layer("WALLS").obstacle_active


def test_closed_lwpolyline_square():
    (o,) = parse_dxf_subset(dxf(SQUARE)).environment.obstacles
    assert o.shape.closed and o.shape.area == 1.0


def test_unknown_entities_are_skipped():
    res = parse_dxf_subset(dxf(LINE, SPLINE))
    assert len(res.environment.obstacles) == 1
    assert res.warnings == ["skipped SPLINE"] and res.skipped["SPLINE"] == 1


def test_circle_is_a_32gon():
    res = parse_dxf_subset(dxf("  0\nCIRCLE\n  8\nC\n 10\n1\n 20\n2\n 40\n0.5\n"))
    (o,) = res.environment.obstacles
    assert len(o.shape.vertices) == 32 and o.circle == (1.0, 2.0, 0.5)
    assert 0.98 < o.shape.area / (3.141592653589793 * 0.25) <= 1.0


def test_malformed_pairing_reports_line():
    with pytest.raises(DXFError, match="line"):
        parse_dxf_subset("  0\nSECTION\n  2\n")
    with pytest.raises(DXFError, match="line 3"):
        parse_dxf_subset("  0\nSECTION\nxx\nENTITIES\n")
    with pytest.raises(DXFError):
        parse_dxf_subset("  0\nSECTION\n  2\nHEADER\n  0\nENDSEC\n")


def test_export_counts():
    empty = export_dxf_subset(Environment())
    assert "ENTITIES" in empty and "LINE" not in empty
    one = export_dxf_subset(Environment().add(polygon([(0, 0), (2, 0), (1, 1)])))
    assert one.count("LWPOLYLINE") == 1 and "\nLINE\n" not in one


def test_layers_survive_import():
    env = Environment((Layer("walls", True, 1), Layer("ref", False, 3)))
    env = env.add(Polyline(((0, 0), (1, 1))), "walls").add(Polyline(((2, 2), (3, 2), (3, 5))), "ref")
    back = parse_dxf_subset(export_dxf_subset(env)).environment
    assert back.layers == env.layers
    assert [o.layer for o in back.obstacles] == ["walls", "ref"]


coord = st.floats(-1000, 1000, allow_nan=False, allow_infinity=False, allow_subnormal=False)


@st.composite
def environments(draw):
    env = Environment()
    layers = draw(st.lists(st.sampled_from(["0", "WALLS", "glass", "ref"]), min_size=1, max_size=3, unique=True))
    for name in layers:
        env = env.with_layer(Layer(name, draw(st.booleans()), draw(st.integers(1, 255))))
    for _ in range(draw(st.integers(0, 6))):
        layer = draw(st.sampled_from(layers))
        kind = draw(st.sampled_from(["line", "poly", "closed", "circle"]))
        try:
            if kind == "circle":
                env = env.add_circle(draw(coord), draw(coord), draw(st.floats(0.01, 50)), layer)
            else:
                n = 2 if kind == "line" else draw(st.integers(3, 6))
                pts = draw(st.lists(st.tuples(coord, coord), min_size=n, max_size=n, unique=True))
                env = env.add(Polyline(tuple(pts), kind == "closed"), layer)
        except GeometryError:
            continue
    return env


@pytest.mark.criterion(11)
@settings(max_examples=100, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(environments())
def test_dxf_round_trip(env):
    back = parse_dxf_subset(export_dxf_subset(env)).environment
    assert back == env
