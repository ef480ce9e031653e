import csv
import io
import math

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from pedsim.demand import ODBin, ODMatrix
from pedsim.engine import (ConfigError, Evacuation, SimConfig, batch_configs, init_state, run, run_batch, step,
                           trigger_evacuation)
from pedsim.geometry import Polyline, rectangle
from pedsim.scenario import (DelayArea, EscalatorLink, Effect, ModifierZone, QueueArea, RouteSpec, SinkArea,
                             SourceArea, Stage, StairZone, TargetMarker, WaitingArea)

from builders import FIXED, corridor

TYPES = {"fixed": FIXED}


def rows(res):
    return list(csv.DictReader(io.StringIO(res.trace_csv)))


def events(res, kind):
    return [e for e in res.events if e[1] == kind]


def detail(e):
    return dict(kv.split("=", 1) for kv in e[3].split(";") if kv)


def single(length=20.0, width=4.0, x=1.5, y=2.0, t=0.0, **kw):
    """One fixed-speed agent spawned at (x, y) at time t, heading for 'out'."""
    sc = corridor(length, width, n=0, types=TYPES, **kw)
    sc.sources.clear()
    sc.add(SourceArea("src", rectangle(x - 0.3, y - 0.3, x + 0.3, y + 0.3), "timetable",
                      supply={"fixed": 100.0}))
    sc.demand.settings["base"] = ODMatrix((ODBin(t, 1.0, "src", "r", 1),))
    return sc


def fixed_corridor(**kw):
    kw.setdefault("types", TYPES)
    sc = corridor(**kw)
    src = sc.sources["src"]
    sc.sources["src"] = SourceArea(src.id, src.polygon, supply={"fixed": 100.0})
    return sc


def per_agent(trace_rows):
    out = {}
    for r in trace_rows:
        out.setdefault(int(r["agent_id"]), []).append(r)
    return out


# -- configuration ------------------------------------------------------------

def test_config_validation():
    for kw in [dict(dt=0), dict(dt=0.6), dict(duration=0), dict(trace_every=0), dict(seed=-1)]:
        with pytest.raises(ConfigError):
            SimConfig(**kw)
    assert SimConfig(dt=0.1, duration=1.0).ticks == 10
    with pytest.raises(ConfigError):
        Evacuation(-1.0)


# -- spawning, movement, absorption ----------------------------------------------

def test_spawn_boundary():
    st = init_state(single(t=0.5), SimConfig(duration=2.0))
    for _ in range(5):
        step(st)
    assert st.n == 0  # ticks 0..4 ran
    step(st)
    assert st.n == 1 and st.spawned == 1  # tick 5, clock 0.5
    ticks = {int(r["tick"]) for r in rows(run(single(t=0.5), SimConfig(duration=2.0)))}
    assert min(ticks) == 5


def test_positions_are_continuous():
    res = run(fixed_corridor(n=30, spread=10.0), SimConfig(duration=40.0, seed=3))
    assert res.summary["exited"] == 30
    for ag, rs in per_agent(rows(res)).items():
        xy = np.array([[float(r["x"]), float(r["y"])] for r in rs])
        steps = np.hypot(*np.diff(xy, axis=0).T)
        assert steps.max() <= 1.25 * 1.05 * 0.1 + 1e-9
        assert (xy[:, 1] > 0.0).all() and (xy[:, 1] < 4.0).all()
        ticks = [int(r["tick"]) for r in rs]
        assert ticks == list(range(ticks[0], ticks[0] + len(ticks)))


def test_sink_absorbs():
    res = run(single(), SimConfig(duration=30.0))
    (ex,) = events(res, "exit")
    assert ex[2] == "1" and detail(ex)["sink"] == "out"
    last = rows(res)[-1]
    assert float(last["time_s"]) < ex[0] + 1e-9
    assert res.summary == {**res.summary, "spawned": 1, "exited": 1, "alive": 0}


def test_determinism():
    a = run(fixed_corridor(n=25), SimConfig(duration=20.0, seed=9))
    b = run(fixed_corridor(n=25), SimConfig(duration=20.0, seed=9))
    assert a.trace_csv == b.trace_csv and a.events_csv() == b.events_csv()
    c = run(corridor(n=25), SimConfig(duration=20.0, seed=9))
    d = run(corridor(n=25), SimConfig(duration=20.0, seed=10))
    assert c.trace_csv != d.trace_csv


def test_trace_decimation():
    full = rows(run(single(), SimConfig(duration=5.0)))
    every = rows(run(single(), SimConfig(duration=5.0, trace_every=5)))
    assert {int(r["tick"]) for r in every} == {int(r["tick"]) for r in full if (int(r["tick"]) + 1) % 5 == 0}
    assert all(r in full for r in every)


@settings(max_examples=8, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 60), st.floats(1.0, 14.0), st.integers(0, 2**31))
def test_conservation_every_tick(n, spread, seed):
    st_ = init_state(corridor(n=n, spread=spread), SimConfig(duration=15.0, seed=seed, write_trace=False))
    for _ in range(150):
        step(st_)
        assert st_.spawned == st_.exited + st_.n
    assert st_.spawned == n  # all due arrivals placed


# -- modelling objects ------------------------------------------------------------

def _speeds_inside(res, x0, x1):
    return [float(r["speed"]) for r in rows(res) if x0 + 0.5 < float(r["x"]) < x1 - 0.5]


def test_stairs_slow_agents():
    sc = single(marker=False)
    sc.add(StairZone("stair", rectangle(8, 0, 12, 4), 0.5, 0.7, 4.0, (1.0, 0.0)))
    res = run(sc, SimConfig(duration=40.0))
    inside = _speeds_inside(res, 8, 12)
    assert inside and max(inside) == pytest.approx(0.625, abs=1e-6)
    down = single(x=18.5, marker=False)
    down.sinks.clear()
    down.add(SinkArea("out", rectangle(0.5, 0.3, 2.0, 3.7)))
    down.add(StairZone("stair", rectangle(8, 0, 12, 4), 0.5, 0.7, 4.0, (1.0, 0.0)))
    inside = _speeds_inside(run(down, SimConfig(duration=40.0)), 8, 12)
    assert max(inside) == pytest.approx(0.875, abs=1e-6)


def test_speed_zone():
    sc = single(marker=False)
    sc.add(ModifierZone("slow", rectangle(8, 0, 12, 4), Effect("speed_factor", 0.5)))
    res = run(sc, SimConfig(duration=40.0))
    assert max(_speeds_inside(res, 8, 12)) == pytest.approx(0.625, abs=1e-6)
    after = [float(r["speed"]) for r in rows(res) if 13.5 < float(r["x"]) < 16]
    assert max(after) == pytest.approx(1.25, abs=1e-6)
    (eff,) = events(res, "zone_effect")
    assert detail(eff) == {"zone": "slow", "effect": "speed_factor"}


def test_set_target_zone():
    sc = single(width=8.0, y=4.0, marker=False)
    sc.add(SinkArea("alt", rectangle(8, 6.5, 10, 7.7)))
    sc.add(ModifierZone("redirect", rectangle(5, 0, 7, 8), Effect("set_target", "alt")))
    res = run(sc, SimConfig(duration=40.0))
    (ex,) = events(res, "exit")
    assert detail(ex)["sink"] == "alt"


def test_delay_area():
    base = single(marker=False)
    plain = events(run(base, SimConfig(duration=40.0)), "exit")[0][0]
    sc = single(marker=False)
    sc.add(DelayArea("gate", rectangle(9.5, 0, 10.5, 4), 5.0))
    sc.routes["r"] = RouteSpec("r", (Stage(("gate",)), Stage(("out",))))
    res = run(sc, SimConfig(duration=40.0))
    delayed = [r for r in rows(res) if r["action"] == "delayed"]
    assert len(delayed) == pytest.approx(50, abs=1)  # 5 s of 0.1 s ticks
    assert events(res, "exit")[0][0] - plain == pytest.approx(5.0, abs=0.5)


def test_queue_fifo():
    sc = fixed_corridor(n=6, spread=3.0, marker=False)
    sc.add(QueueArea("desk", Polyline(((6, 2), (10, 2))), 1, 4.0))
    sc.routes["r"] = RouteSpec("r", (Stage(("desk",)), Stage(("out",))))
    res = run(sc, SimConfig(duration=80.0, seed=2))
    admits = [(e[2], float(detail(e)["completion"])) for e in events(res, "queue_admit")]
    served = [e[2] for e in events(res, "queue_serve")]
    assert len(admits) == 6 and served == [a for a, _ in admits]
    done = [c for _, c in admits]
    assert all(b - a >= 4.0 - 1e-9 for a, b in zip(done, done[1:]))
    q = res.summary["queues"]["desk"]
    assert q == {"admitted": 6, "served": 6, "in_queue": 0, "abandoned": 0}
    assert res.summary["exited"] == 6


def test_waiting_area_release():
    sc = fixed_corridor(n=8, spread=2.0, marker=False)
    sc.add(WaitingArea("hall", rectangle(7, 0.5, 11, 3.5), "nearest_entry_first", release_time=25.0))
    sc.routes["r"] = RouteSpec("r", (Stage(("hall",)), Stage(("out",))))
    res = run(sc, SimConfig(duration=60.0, seed=4))
    assert all(e[0] >= 25.0 for e in events(res, "exit")) and res.summary["exited"] == 8
    (rel,) = events(res, "release")
    assert rel[0] == pytest.approx(25.0) and detail(rel)["agents"] == "8"
    at = [r for r in rows(res) if r["tick"] == "239"]  # just before release
    assert len(at) == 8 and all(r["action"] == "waiting" for r in at)
    xy = np.array([[float(r["x"]), float(r["y"])] for r in at])
    assert all(7 <= x <= 11 and 0.5 <= y <= 3.5 for x, y in xy)
    d = np.hypot(*(xy[:, None, :] - xy[None, :, :]).transpose(2, 0, 1))
    assert d[np.triu_indices(8, 1)].min() >= 2 * FIXED.radius * 0.95


def test_marker_split():
    sc = fixed_corridor(n=40, spread=20.0, width=8.0, marker=False)
    sc.add(TargetMarker("north", rectangle(9, 5.5, 11, 7.5)))
    sc.add(TargetMarker("south", rectangle(9, 0.5, 11, 2.5)))
    sc.routes["r"] = RouteSpec("r", (Stage(("north", "south"), "percentage", (50, 50)), Stage(("out",))))
    res = run(sc, SimConfig(duration=60.0, seed=5))
    hits = [detail(e)["node"] for e in events(res, "reach")]
    assert len(hits) == 40 and 10 <= hits.count("north") <= 30
    assert res.summary["exited"] == 40


def test_escalator_capacity():
    sc = fixed_corridor(n=30, spread=5.0, marker=False)
    sc.add(EscalatorLink("esc", Polyline(((8, 0.5), (8, 3.5))), Polyline(((12, 0.5), (12, 3.5))), 12.0, 5.0))
    sc.routes["r"] = RouteSpec("r", (Stage(("esc",)), Stage(("out",))))
    res = run(sc, SimConfig(duration=200.0, seed=6, write_trace=False))
    enters = [e[0] for e in events(res, "escalator_enter")]
    assert len(enters) == 30 and res.summary["exited"] == 30
    for i, t in enumerate(enters):
        assert sum(1 for u in enters[i:] if u < t + 60.0 - 1e-9) <= 12
    exits = {e[2]: e[0] for e in events(res, "escalator_exit")}
    for e in events(res, "escalator_enter"):
        assert exits[e[2]] - e[0] == pytest.approx(5.0, abs=0.11)


def test_quickest_time_route():
    sc = fixed_corridor(n=6, spread=3.0, width=8.0, marker=False)
    sc.sinks.clear()
    sc.add(SinkArea("near", rectangle(10, 0.5, 11, 7.5)))
    sc.add(SinkArea("far", rectangle(18, 0.5, 19, 7.5)))
    sc.routes["r"] = RouteSpec("r", (Stage(("far", "near"), "quickest_time"),))
    res = run(sc, SimConfig(duration=40.0, seed=1))
    assert {detail(e)["sink"] for e in events(res, "exit")} == {"near"}
    st_ = init_state(sc, SimConfig(duration=1.0))
    assert st_.world.qfields["near"].kind == "time"


# -- evacuation ---------------------------------------------------------------------

def evac_scene(n=6, familiarity=None, default_east=False):
    sc = fixed_corridor(n=n, spread=2.0, marker=False)
    if familiarity is not None:
        sc.types = {"fixed": FIXED.__class__(**{**FIXED.__dict__, "familiarity": familiarity})}
    sc.sinks.clear()
    sc.add(SinkArea("west", rectangle(0.1, 0.3, 0.4, 3.7), True))
    sc.add(SinkArea("east", rectangle(19.6, 0.3, 19.9, 3.7), True, default_exit=default_east))
    sc.add(SinkArea("shop", rectangle(15, 0.3, 16, 3.7)))
    sc.add(WaitingArea("hall", rectangle(4, 0.5, 7, 3.5), "nearest_entry_first"))
    sc.routes["r"] = RouteSpec("r", (Stage(("hall",)), Stage(("shop",))))
    return sc


def test_evacuation_nearest_exit():
    res = run(evac_scene(), SimConfig(duration=100.0, evacuation=Evacuation(60.0, 10.0)))
    assert {detail(e)["exit"] for e in events(res, "react")} == {"west"}
    assert {detail(e)["sink"] for e in events(res, "exit")} == {"west"}
    assert res.summary["evacuation_complete"] and res.summary["egress_time"] > 10.0


def test_evacuation_fixed_reaction():
    res = run(evac_scene(), SimConfig(duration=100.0, evacuation=Evacuation(60.0, 10.0)))
    (alarm,) = events(res, "evacuation")
    assert alarm[0] == pytest.approx(60.0)
    reacts = events(res, "react")
    assert len(reacts) == 6 and all(70.0 - 1e-9 <= e[0] <= 70.1 + 1e-9 for e in reacts)
    by_agent = per_agent(rows(res))
    for rs in by_agent.values():
        before = [r for r in rs if float(r["time_s"]) <= 70.0 + 1e-9]
        assert all(r["action"] != "evacuating" for r in before)


def test_evacuation_variable_reaction():
    res = run(evac_scene(), SimConfig(duration=150.0, seed=2, evacuation=Evacuation(60.0)))
    times = [e[0] for e in events(res, "react")]
    assert len(times) == 6 and all(75.0 - 1e-9 <= t <= 120.1 for t in times)


def test_unfamiliar_agents_use_known_exits():
    res = run(evac_scene(familiarity=0.0, default_east=True), SimConfig(duration=120.0,
                                                                        evacuation=Evacuation(60.0, 10.0)))
    assert {detail(e)["exit"] for e in events(res, "react")} == {"east"}
    res = run(evac_scene(familiarity=1.0, default_east=True), SimConfig(duration=120.0,
                                                                        evacuation=Evacuation(60.0, 10.0)))
    assert {detail(e)["exit"] for e in events(res, "react")} == {"west"}


def test_no_spawning_after_alarm():
    sc = fixed_corridor(n=50, spread=50.0)
    st_ = init_state(sc, SimConfig(duration=60.0, evacuation=Evacuation(100.0, 0.0)))
    for _ in range(50):
        step(st_)
    trigger_evacuation(st_, st_.clock)
    spawned = st_.spawned
    for _ in range(50):
        step(st_)
    assert st_.spawned == spawned


# -- batches -------------------------------------------------------------------

def test_batch_seeds(tmp_path):
    sc = corridor(n=15)
    res = run_batch(sc, batch_configs(SimConfig(duration=10.0, seed=1), 3), tmp_path)
    assert [r.seed for r in res] == [1, 2, 3]
    assert len({r.trace_csv for r in res}) == 3
    assert sorted(p.name for p in tmp_path.iterdir()) == ["run_0001", "run_0002", "run_0003"]
    same = run_batch(sc, [SimConfig(duration=10.0, seed=4)] * 2)
    assert same[0].trace_csv == same[1].trace_csv
    (one,) = run_batch(sc, [SimConfig(duration=10.0, seed=1)])
    assert one.trace_csv == res[0].trace_csv
    empty = run_batch(corridor(n=0), batch_configs(SimConfig(duration=2.0), 2))
    assert empty[0].trace_csv == empty[1].trace_csv


def test_batch_parallel():
    sc = corridor(n=10)
    cfgs = batch_configs(SimConfig(duration=5.0, seed=7), 2)
    par = run_batch(sc, cfgs, jobs=2)
    ser = run_batch(sc, cfgs, jobs=1)
    assert [r.trace_csv for r in par] == [r.trace_csv for r in ser]


def test_batch_failures_are_isolated():
    sc = corridor(n=5)
    sc.routes["r"] = RouteSpec("r", (Stage(("missing",)),))
    (bad,) = run_batch(sc, [SimConfig(duration=5.0)])
    assert bad.error is not None and bad.trace_csv is None
