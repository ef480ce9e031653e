"""Pedestrian micro-simulation: geometry, demand, scenario objects, a seeded
time-stepped engine, trace analysis, raster presentation and checklist
scoring."""

__version__ = "0.1.0"

from .geometry import Environment, Polyline, polygon, rectangle  # noqa: E402
from .scenario import Scenario, load_bundle, dump_bundle, validate_scenario  # noqa: E402
from .engine import SimConfig, Evacuation, run, run_batch  # noqa: E402
from .analysis import Trace  # noqa: E402
from .checklist import load_checklist, score, self_manifest  # noqa: E402

__all__ = ["Environment", "Polyline", "polygon", "rectangle", "Scenario", "load_bundle", "dump_bundle",
           "validate_scenario", "SimConfig", "Evacuation", "run", "run_batch", "Trace", "load_checklist",
           "score", "self_manifest", "__version__"]
