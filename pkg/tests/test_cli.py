import csv
import io
import json

import numpy as np
import pytest

from pedsim.analysis import Trace, count_crossings, MeasureLine
from pedsim.cli import main
from pedsim.geometry import Polyline
from pedsim.presentation import MapImage
from pedsim.scenario import dump_bundle

from builders import corridor


@pytest.fixture
def bundle(tmp_path):
    p = tmp_path / "corridor.json"
    p.write_text(dump_bundle(corridor(n=6, spread=3.0)), encoding="utf-8")
    return p


@pytest.fixture
def broken(tmp_path):
    sc = corridor(n=2)
    sc.environment = sc.environment.add(Polyline(((10.0, -1.0), (10.0, 5.0))))
    p = tmp_path / "broken.json"
    p.write_text(dump_bundle(sc), encoding="utf-8")
    return p


def test_validate_exit_codes(bundle, broken, tmp_path, capsys):
    assert main(["validate", str(bundle)]) == 0
    assert main(["validate", str(broken)]) == 1
    assert "unreachable" in capsys.readouterr().out
    assert main(["validate", str(tmp_path / "missing.json")]) == 2
    assert main(["validate"]) == 2
    assert main(["bogus"]) == 2


def test_run_writes_outputs(bundle, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(bundle), "--duration", "20", "--seed", "3", "--out", str(out)]) == 0
    for name in ("trace.csv", "events.csv", "run.json"):
        assert (out / name).exists()
    meta = json.loads((out / "run.json").read_text())
    assert meta["seed"] == 3 and meta["summary"]["spawned"] == 6
    assert main(["run", str(bundle), "--dt", "2", "--out", str(out)]) == 1


def test_run_batch_is_deterministic(bundle, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["run", str(bundle), "--duration", "10", "--batch", "3", "--jobs", "1", "--out", str(out)]) == 0
    dirs = sorted(p.name for p in a.iterdir())
    assert dirs == ["run_0001", "run_0002", "run_0003"]
    for d in dirs:
        assert (a / d / "trace.csv").read_bytes() == (b / d / "trace.csv").read_bytes()
    seeds = [json.loads((a / d / "run.json").read_text())["seed"] for d in dirs]
    assert seeds == [0, 1, 2]
    assert (a / "run_0001" / "trace.csv").read_bytes() != (a / "run_0002" / "trace.csv").read_bytes()


def test_run_evacuate_at(bundle, tmp_path):
    out = tmp_path / "evac"
    assert main(["run", str(bundle), "--duration", "65", "--evacuate-at", "60", "--reaction", "1",
                 "--out", str(out)]) == 0
    ev = list(csv.DictReader(io.StringIO((out / "events.csv").read_text())))
    alarms = [e for e in ev if e["kind"] == "evacuation"]
    assert len(alarms) == 1 and float(alarms[0]["time_s"]) == pytest.approx(60.0)
    summary = json.loads((out / "run.json").read_text())["summary"]
    assert summary["alarm_time"] == pytest.approx(60.0)
    assert summary["egress_time"] == 0.0  # everybody had left before the alarm


def test_analyze_delegates(bundle, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(bundle), "--duration", "30", "--out", str(out)]) == 0
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"lines": {"mid": {"vertices": [[10, 0], [10, 4]]}},
                                "requests": [{"kind": "count", "line": "mid", "name": "mid"}]}))
    res = tmp_path / "res.csv"
    assert main(["analyze", str(out), str(spec), "--out", str(res)]) == 0
    rows = {(r["metric"]): r["value"] for r in csv.DictReader(io.StringIO(res.read_text())) if r["subject"] == "all"}
    direct = count_crossings(Trace.from_csv(out / "trace.csv"),
                             MeasureLine("mid", Polyline(((10.0, 0.0), (10.0, 4.0)))))
    assert int(rows["count"]) == direct.count and direct.count > 0
    assert main(["analyze", str(out), str(tmp_path / "nope.json")]) == 2


def test_render_empty_trace_is_uniform(tmp_path):
    run = tmp_path / "empty"
    run.mkdir()
    (run / "trace.csv").write_text("tick,time_s,agent_id,type,x,y,action,stage,speed\n")
    out = tmp_path / "d.ppm"
    assert main(["render", str(run), "--kind", "density", "--bounds", "0", "0", "4", "4", "--out", str(out)]) == 0
    img = MapImage.from_ppm(out.read_bytes())
    body = img.pixels[:, :16]
    assert np.all(body == body[0, 0])
    assert main(["render", str(run), "--kind", "nonsense", "--out", str(out)]) == 2


def test_render_kinds(bundle, tmp_path):
    out = tmp_path / "run"
    assert main(["run", str(bundle), "--duration", "10", "--out", str(out)]) == 0
    for kind in ("density", "utilization", "time", "trails"):
        assert main(["render", str(out), "--kind", kind, "--out", str(tmp_path / "maps")]) == 0
        assert (tmp_path / "maps" / f"{kind}.ppm").exists()
    assert main(["render", str(out), "--kind", "frames", "--every", "2", "--out", str(tmp_path / "f")]) == 0
    assert len(list((tmp_path / "f").glob("frame_*.ppm"))) == 5


def test_score_self(capsys, tmp_path):
    assert main(["score", "--self"]) == 0
    text = capsys.readouterr().out
    body = text.splitlines()[2:]
    assert len(body) == 12
    assert main(["score", "--self", "--format", "csv"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert len(rows) == 13
    assert main(["score"]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("id,answer\n2d.space_continuous,yes\n")
    assert main(["score", str(bad)]) == 1
