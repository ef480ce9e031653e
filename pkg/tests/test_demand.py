from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from pedsim.demand import (AddBin, DeleteBins, DemandError, DemandSettings, ODBin, ODMatrix, ScalePercent,
                           SetFrequency, SupplyType, assign_types, edit_demand, export_od_csv, export_supply_csv,
                           load_setting, parse_od_csv, parse_supply_csv, spread_profile, store_setting,
                           total_injections)

from oracles import uniform_spread

HEADER = "bin_start,bin_length,origin,destination,count\n"


def test_parse_examples():
    m = parse_od_csv(HEADER + "0,300,gateA,exitB,300\n")
    assert len(m.bins) == 1 and m.total == 300
    assert parse_od_csv(HEADER).bins == ()
    with pytest.raises(DemandError, match="row 3"):
        parse_od_csv(HEADER + "0,300,gateA,exitB,3\n0,60,gateA,exitB,4\n")
    with pytest.raises(DemandError, match="row 2"):
        parse_od_csv(HEADER + "0,300,gateA,exitB,-1\n")
    with pytest.raises(DemandError, match="row 2"):
        parse_od_csv(HEADER + "0,0,gateA,exitB,1\n")
    with pytest.raises(DemandError, match="row 1"):
        parse_od_csv("start,len,o,d,n\n")


def test_uniform_spread():
    m = parse_od_csv(HEADER + "0,300,gateA,exitB,300\n")
    p = spread_profile(m, "gateA")
    assert len(p) == 300 and p.times[0] == 0.5 and p.times[-1] == 299.5
    assert [Fraction(t) for t in p.times] == uniform_spread(0, 300, 300)
    one = spread_profile(ODMatrix((ODBin(0, 60, "s", "d", 1),)), "s")
    assert one.times == [30.0]
    assert len(spread_profile(ODMatrix((ODBin(0, 60, "s", "d", 0),)), "s")) == 0


def test_timetable_profile():
    m = ODMatrix((ODBin(12, 1, "s", "d", 2), ODBin(3, 1, "s", "d", 1)))
    p = spread_profile(m, "s", "timetable")
    assert p.mode == "timetable" and p.times == [3.0, 12.0, 12.0]


def test_poisson_spread_is_seeded():
    m = ODMatrix((ODBin(0, 100, "s", "d", 50),))
    a, b = spread_profile(m, "s", ("poisson", 7)), spread_profile(m, "s", ("poisson", 7))
    assert a == b and len(a) == 50
    assert all(0 <= t < 100 for t in a.times) and a.times == sorted(a.times)
    assert spread_profile(m, "s", ("poisson", 8)) != a


def test_unknown_source():
    with pytest.raises(DemandError):
        spread_profile(ODMatrix(), "nowhere")


def test_edit_demand():
    m = ODMatrix((ODBin(0, 300, "a", "b", 200), ODBin(300, 300, "a", "b", 5)))
    k1, k2 = (0.0, "a", "b"), (300.0, "a", "b")
    up = edit_demand(m, ScalePercent(10))
    assert [b.count for b in up.bins] == [220, 6]
    assert edit_demand(m, ScalePercent(-100)).total == 0
    assert [b.count for b in edit_demand(m, ScalePercent(10, (k2,))).bins] == [200, 6]
    assert [b.key for b in edit_demand(m, DeleteBins((k1,))).bins] == [k2]
    added = edit_demand(m, AddBin(ODBin(600, 60, "a", "c", 3)))
    assert added.total == 208
    assert edit_demand(m, SetFrequency(0.5, (k1,))).bins[0].count == 150
    with pytest.raises(DemandError):
        edit_demand(m, DeleteBins(((900.0, "a", "b"),)))
    with pytest.raises(DemandError):
        edit_demand(m, ScalePercent(-150))
    with pytest.raises(DemandError):
        edit_demand(m, AddBin(ODBin(0, 60, "a", "b", 1)))


def test_settings():
    s = DemandSettings()
    base = ODMatrix((ODBin(0, 60, "a", "b", 10), ODBin(60, 60, "a", "b", 4)))
    store_setting(s, "base", base)
    store_setting(s, "low", edit_demand(base, ScalePercent(-50)))
    assert load_setting(s, "base") == base
    assert [b.count for b in load_setting(s, "low").bins] == [5, 2]
    with pytest.raises(DemandError, match="base, low"):
        load_setting(s, "missing")
    with pytest.raises(DemandError):
        store_setting(s, "", base)


def test_supply_mix():
    sup = SupplyType("gate", {"commuter": 70, "prm": 30})
    assert sup.problems() == []
    assert SupplyType("gate", {"commuter": 60, "prm": 30}).problems() == ["mix sums to 90"]
    types = assign_types(sup, 10)
    assert types.count("commuter") == 7 and types.count("prm") == 3
    with pytest.raises(DemandError):
        SupplyType("gate", {"x": -1})
    text = "source,type,percent\ngate,commuter,70\ngate,prm,30\n"
    sups = parse_supply_csv(text)
    assert sups["gate"] == sup
    assert parse_supply_csv(export_supply_csv(sups)) == sups


def test_export_shape():
    assert export_od_csv(ODMatrix()) == HEADER
    assert len(export_od_csv(ODMatrix((ODBin(0, 1, "a", "b", 1),))).splitlines()) == 2


names = st.text("abcdefgh_XYZ", min_size=1, max_size=6)


@st.composite
def matrices(draw):
    bins = {}
    for _ in range(draw(st.integers(0, 12))):
        b = ODBin(draw(st.floats(0, 1e5, allow_nan=False)), draw(st.floats(0.001, 1e4)), draw(names), draw(names),
                  draw(st.integers(0, 10**6)))
        bins[b.key] = b
    return ODMatrix(tuple(bins.values()))


@pytest.mark.criterion(11)
@settings(max_examples=100, deadline=None)
@given(matrices())
def test_od_csv_round_trip(m):
    text = export_od_csv(m)
    assert parse_od_csv(text) == m
    assert export_od_csv(parse_od_csv(text)) == text


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_total_conservation(m):
    m = ODMatrix(tuple(b for b in m.bins if b.count <= 500))
    profiles = [spread_profile(m, o) for o in m.origins]
    assert total_injections(profiles) == m.total
    for p in profiles:
        assert p.times == sorted(p.times)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 1000), min_size=2, max_size=6), st.integers(-100, 200), st.integers(-100, 200))
def test_scaling_disjoint_bins_commutes(counts, p, q):
    m = ODMatrix(tuple(ODBin(float(i), 1.0, "s", "d", c) for i, c in enumerate(counts)))
    a, b = ((0.0, "s", "d"),), ((1.0, "s", "d"),)
    one = edit_demand(edit_demand(m, ScalePercent(p, a)), ScalePercent(q, b))
    two = edit_demand(edit_demand(m, ScalePercent(q, b)), ScalePercent(p, a))
    assert one == two
