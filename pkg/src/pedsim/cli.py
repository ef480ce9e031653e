"""Command line: pedsim validate | run | analyze | render | score.

Exit codes: 0 ok, 1 domain error (invalid model, failed run, insufficient
input), 2 I/O or usage error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from . import __version__
from .analysis import AnalysisError, GridSpec, Trace, density_grid, export_analysis, run_spec, utilization_grid
from .checklist import ChecklistError, load_checklist, load_manifest, score, self_manifest
from .demand import DemandError
from .engine import ConfigError, Evacuation, SimConfig, batch_configs, run, run_batch
from .geometry import GeometryError
from .presentation import (RenderError, Viewport, emit_frames, render_density_map, render_time_map,
                           render_trails, render_utilization_map)
from .scenario import PedFilter, ScenarioError, load_bundle, validate_scenario

OK, DOMAIN, USAGE = 0, 1, 2
DOMAIN_ERRORS = (ScenarioError, ConfigError, AnalysisError, RenderError, ChecklistError, DemandError,
                 GeometryError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE)


def _read_json(path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def _emit(text: str, out=None):
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# -- validate -------------------------------------------------------------------

def cmd_validate(args) -> int:
    sc = load_bundle(Path(args.scenario))
    rep = validate_scenario(sc)
    _emit(rep.to_csv() if args.format == "csv" else "\n".join(rep.lines()) + "\n")
    return OK if rep.ok else DOMAIN


# -- run --------------------------------------------------------------------------

_CONFIG_KEYS = {f.name for f in fields(SimConfig)}


def build_config(scenario, args) -> SimConfig:
    """Scenario config section, then --config file, then flags."""
    merged = {k: v for k, v in scenario.config.items() if k in _CONFIG_KEYS}
    if args.config:
        merged.update({k: v for k, v in _read_json(args.config).items() if k in _CONFIG_KEYS})
    for name in ("seed", "dt", "duration", "trace_every"):
        v = getattr(args, name, None)
        if v is not None:
            merged[name] = v
    evac = merged.pop("evacuation", None)
    if isinstance(evac, dict):
        evac = Evacuation(float(evac["trigger_time"]), evac.get("reaction", "variable"),
                          float(evac.get("familiarity_default", 1.0)))
    elif evac is not None and not isinstance(evac, Evacuation):
        evac = Evacuation(float(evac))
    if args.evacuate_at is not None:
        reaction = args.reaction if args.reaction is not None else (evac.reaction if evac else "variable")
        evac = Evacuation(args.evacuate_at, reaction, evac.familiarity_default if evac else 1.0)
    elif evac is not None and args.reaction is not None:
        evac = replace(evac, reaction=args.reaction)
    if "period" in merged and merged["period"] is not None:
        merged["period"] = tuple(merged["period"])
    return SimConfig(evacuation=evac, **merged)


def cmd_run(args) -> int:
    sc = load_bundle(Path(args.scenario))
    rep = validate_scenario(sc)
    if not rep.ok:
        print("\n".join(rep.lines()), file=sys.stderr)
        return DOMAIN
    cfg = build_config(sc, args)
    out = Path(args.out)
    if args.batch and args.batch > 1:
        results = run_batch(sc, batch_configs(cfg, args.batch, not args.fixed_seed), out,
                            jobs=args.jobs or os.cpu_count() or 1)
    else:
        results = [run(sc, cfg, out)]
    failed = 0
    for r in results:
        where = r.out_dir or str(out)
        if r.error:
            failed += 1
            print(f"seed {r.seed}: FAILED {r.error}", file=sys.stderr)
            continue
        s = r.summary
        line = f"seed {r.seed}: spawned {s['spawned']} exited {s['exited']} alive {s['alive']} -> {where}"
        if "alarm_time" in s:
            egress = s.get("egress_time")
            line += f"; alarm {s['alarm_time']:g} s, egress " + (f"{egress:g} s" if egress is not None else "incomplete")
        print(line)
    return DOMAIN if failed else OK


# -- analyze ---------------------------------------------------------------------------

def _load_trace(path) -> Trace:
    p = Path(path)
    if p.is_dir():
        p = p / "trace.csv"
    if not p.exists():
        raise FileNotFoundError(str(p))
    return Trace.from_csv(p)


def cmd_analyze(args) -> int:
    trace = _load_trace(args.trace)
    spec = _read_json(args.spec)
    if "analyses" in spec and "requests" not in spec:
        spec = spec["analyses"]
    rows = run_spec(trace, spec)
    _emit(export_analysis(rows), args.out)
    return OK


# -- render --------------------------------------------------------------------------------

def _bounds(trace: Trace, spec: dict):
    if spec.get("bounds"):
        return tuple(map(float, spec["bounds"]))
    if len(trace) == 0:
        return (0.0, 0.0, 10.0, 10.0)
    pad = float(spec.get("pad", 1.0))
    return (float(trace.x.min()) - pad, float(trace.y.min()) - pad,
            float(trace.x.max()) + pad, float(trace.y.max()) + pad)


def cmd_render(args) -> int:
    trace = _load_trace(args.trace)
    spec = _read_json(args.spec) if args.spec else {}
    for name in ("kind", "t", "threshold", "every", "cell", "mpp"):
        v = getattr(args, name, None)
        if v is not None:
            spec[name] = v
    if args.bounds:
        spec["bounds"] = args.bounds
    kind = spec.get("kind", "density")
    b = _bounds(trace, spec)
    grid = GridSpec.covering(*b, float(spec.get("cell", 1.0)))
    horizon = tuple(spec["horizon"]) if spec.get("horizon") else None
    legend = bool(spec.get("legend", True))
    out = Path(args.out)
    if kind == "frames":
        view = Viewport.fit(b, float(spec.get("mpp", 0.1)))
        paths = emit_frames(trace, view, float(spec.get("every", 1.0)), out, bool(spec.get("stamp", True)),
                            spec.get("duration"))
        print(f"{len(paths)} frame(s) -> {out}")
        return OK
    if kind == "density":
        t = spec.get("t", float(trace.times[-1]) if len(trace.times) else 0.0)
        img = render_density_map(density_grid(trace, grid, float(t)), legend=legend, grid=grid)
    elif kind == "utilization":
        img = render_utilization_map(utilization_grid(trace, grid, horizon), legend=legend, grid=grid)
    elif kind == "time":
        img = render_time_map(trace, grid, horizon, threshold=spec.get("threshold"), legend=legend)
    elif kind == "trails":
        agents = spec.get("agents")
        if isinstance(agents, dict):
            agents = PedFilter.from_json(agents)
        window = tuple(spec["window"]) if spec.get("window") else None
        img = render_trails(trace, Viewport.fit(b, float(spec.get("mpp", 0.1))), agents, window)
    else:
        raise RenderError(f"unknown map kind {kind!r}")
    if out.suffix.lower() != ".ppm":
        out = out / f"{kind}.ppm"
    img.save(out)
    print(f"{kind} map {img.width}x{img.height} -> {out}")
    return OK


# -- score ----------------------------------------------------------------------------------

def cmd_score(args) -> int:
    if args.self == bool(args.manifest):
        raise _Usage("give either a manifest file or --self")
    cl = load_checklist(Path(args.checklist)) if args.checklist else load_checklist()
    man = self_manifest() if args.self else load_manifest(Path(args.manifest))
    rep = score(man, cl)
    _emit(rep.to_csv() if args.format == "csv" else rep.to_text(), args.out)
    return OK


class _Usage(Exception):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pedsim", description="Pedestrian micro-simulation and checklist scoring.")
    p.add_argument("--version", action="version", version=f"pedsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    v = sub.add_parser("validate", help="consistency check of a scenario bundle")
    v.add_argument("scenario")
    v.add_argument("--format", choices=("text", "csv"), default="text")
    v.set_defaults(func=cmd_validate)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("scenario")
    r.add_argument("--out", default="runs")
    r.add_argument("--config", help="JSON file with run settings (flags override it)")
    r.add_argument("--seed", type=int)
    r.add_argument("--dt", type=float)
    r.add_argument("--duration", type=float)
    r.add_argument("--trace-every", dest="trace_every", type=int)
    r.add_argument("--batch", type=int, default=1, help="number of runs; seeds auto-increment")
    r.add_argument("--fixed-seed", action="store_true", help="keep the same seed across a batch")
    r.add_argument("--jobs", type=int, help="worker processes for batches (default: CPU count)")
    r.add_argument("--evacuate-at", dest="evacuate_at", type=float)
    r.add_argument("--reaction", type=float, help="fixed reaction time in seconds")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("analyze", help="run analyses on a trace")
    a.add_argument("trace", help="trace.csv or a run directory")
    a.add_argument("spec", help="analysis spec JSON (or a scenario bundle with an analyses section)")
    a.add_argument("--out", help="CSV output path (default: stdout)")
    a.add_argument("--format", choices=("csv",), default="csv")
    a.set_defaults(func=cmd_analyze)

    m = sub.add_parser("render", help="draw maps, trails or frames from a trace")
    m.add_argument("trace")
    m.add_argument("--spec", help="map spec JSON")
    m.add_argument("--kind", choices=("density", "utilization", "time", "trails", "frames"))
    m.add_argument("--t", type=float)
    m.add_argument("--threshold", type=float)
    m.add_argument("--every", type=float)
    m.add_argument("--cell", type=float)
    m.add_argument("--mpp", type=float)
    m.add_argument("--bounds", type=float, nargs=4, metavar=("X0", "Y0", "X1", "Y1"))
    m.add_argument("--out", default="maps")
    m.set_defaults(func=cmd_render)

    s = sub.add_parser("score", help="score a capability manifest")
    s.add_argument("manifest", nargs="?")
    s.add_argument("--self", action="store_true", help="score this package's own manifest")
    s.add_argument("--checklist", help="mandatory-flag override file")
    s.add_argument("--format", choices=("text", "csv"), default="text")
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"pedsim: error: {exc}", file=sys.stderr)
        return USAGE
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        print(f"pedsim: error: {exc}", file=sys.stderr)
        return USAGE
    except DOMAIN_ERRORS as exc:
        print(f"pedsim: {exc}", file=sys.stderr)
        return DOMAIN


if __name__ == "__main__":
    raise SystemExit(main())
