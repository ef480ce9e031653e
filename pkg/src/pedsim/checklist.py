"""Capability checklist for pedestrian simulation tools and its two-tier
scoring: per-category sufficiency (every mandatory item answered yes) and
overall completeness (share of items answered yes)."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

ANSWERS = ("yes", "no", "under_development")

CATEGORIES = (
    ("2d", "2D physical environment"),
    ("3d", "3D environment"),
    ("vce", "Advanced environmental features"),
    ("obj", "Modelling and routing objects"),
    ("od", "OD matrix input and manipulation"),
    ("evac", "Evacuation studies"),
    ("ped", "Pedestrians"),
    ("out", "Analysis of simulation outputs"),
    ("pres", "Presentation tools"),
    ("veh", "Vehicle and pedestrian interaction"),
    ("tech", "Robustness and technical details"),
    ("val", "Validation"),
)
CATEGORY_NAMES = dict(CATEGORIES)


class ChecklistError(ValueError):
    pass


@dataclass(frozen=True)
class ChecklistItem:
    id: str
    category: str
    description: str
    mandatory: bool = False

    def __post_init__(self):
        if self.category not in CATEGORY_NAMES:
            raise ChecklistError(f"unknown category {self.category!r}")
        if not self.id.startswith(self.category + "."):
            raise ChecklistError(f"item id {self.id!r} must carry its category prefix")


# (id, description, mandatory)
_ITEMS = {
    "2d": [
        ("space_continuous", "continuous space representation", False),
        ("space_discrete", "discrete cell-based space representation", False),
        ("grid_size_variable", "customizable cell size for discrete space", False),
        ("cad_import_reference", "scaled 2D CAD import used as reference", True),
        ("cad_import_obstacle", "2D CAD lines imported as obstacles", False),
        ("cad_manipulation", "cut, copy, paste, rotate, translate, scale of CAD", False),
        ("cad_layers", "CAD layers kept on import and editable", False),
        ("simulation_layers", "per-layer obstacle switch", False),
        ("cad_export", "export of the edited CAD drawing", False),
        ("cad_copy_across_models", "copy CAD objects and layers between models", False),
        ("picture_import", "raster picture import as backdrop", False),
        ("measuring_in_model", "distance and angle measurement tools", True),
    ],
    "3d": [
        ("environment_supported", "3D environment built in the platform", False),
        ("environment_external", "3D environment built in an external tool", False),
        ("pedestrians", "3D pedestrian models from a library", False),
        ("import", "3D CAD import", False),
        ("manipulation", "3D object editing in and across models", False),
        ("layers", "3D object layers", False),
        ("export", "3D CAD export", False),
        ("object_animation_native", "animated 3D objects modelled in the platform", False),
        ("object_animation_imported", "imported 3D object animations", False),
        ("pedestrian_animation_native", "animated walking pedestrians in the platform", False),
        ("pedestrian_animation_imported", "imported pedestrian animations over 2D runs", False),
    ],
    "vce": [
        ("stairs", "configurable stair objects", False),
        ("escalators", "escalators with width and ppm capacity", False),
        ("lifts", "lifts with capacity, cycle or call priority", False),
        ("train", "train objects with carriages and doors", False),
        ("car", "car objects", False),
        ("bus", "bus objects with boarding and alighting", False),
        ("plane", "plane objects with boarding and alighting", False),
        ("ship", "ship objects with boarding and alighting", False),
        ("context_objects", "domain object libraries (check-in, belts, counters)", False),
    ],
    "obj": [
        ("input_areas", "sources injecting typed pedestrians by rate or timetable", True),
        ("exit_areas", "sinks removing agents on arrival", True),
        ("target_areas", "intermediate markers with split to next target", True),
        ("waiting_areas", "areas distributing agents inside by a rule", True),
        ("behaviour_zones", "zones altering behaviour when crossed", False),
        ("delay_areas", "areas holding agents for fixed or variable time", True),
        ("target_kind_modifiers", "zones reassigning target or pedestrian type", False),
        ("queuing_areas", "ordered queues with service", True),
        ("routes_fixed", "fixed per-type route sequences", True),
        ("routes_dynamic", "routes changing on filters or live conditions", False),
        ("route_choice", "target choice by split, occupancy or distance", True),
        ("pedestrian_filtering", "filtering by type, destination, visits, action", False),
        ("dynamic_assignment", "quickest-time routing from congestion", False),
    ],
    "od": [
        ("input_csv", "OD matrix import from worksheet files", True),
        ("import_timetable", "arrivals injected at listed times", False),
        ("import_spread", "binned arrivals spread over intervals", False),
        ("supply_types", "per-entrance type mix import", False),
        ("manipulation", "editing demand inside the platform", False),
        ("export", "OD matrix export to worksheet files", True),
        ("multiple_settings", "stored, scaled demand settings", False),
    ],
    "evac": [
        ("evacuation_mode", "triggerable evacuation to nearest exits", False),
        ("reaction_time", "fixed or variable alarm reaction time", True),
        ("familiarity", "partial knowledge of the environment", False),
        ("smoke_import", "smoke data import", False),
    ],
    "ped": [
        ("speed_distributed", "preferred speed drawn from a distribution", False),
        ("size_customizable", "customizable body size", False),
        ("luggage", "luggage affecting speed and size", True),
        ("prm", "persons with restricted mobility", False),
        ("agent_library", "library of predefined agent types", False),
        ("collision_avoidance", "anticipatory avoidance of agents and obstacles", True),
        ("moving_to_target", "movement along shortest paths to targets", True),
        ("planned_activities", "scheduled activities in fixed or variable order", False),
        ("knowledge_of_environment", "full or partial environment knowledge", False),
        ("perceive_obstacles", "perception of obstacles", False),
        ("perceive_agents", "perception of other agents", False),
        ("perceive_density", "perception of density", False),
        ("perceive_signals", "perception of visual or acoustic signals", False),
        ("groups", "groups that stay together", False),
    ],
    "out": [
        ("local_density", "pedestrians per square meter in a region", True),
        ("los_cmd", "level of service and cumulative mean density", True),
        ("utilization", "utilization of space over a period", True),
        ("transfer_lines", "transfer times between lines", True),
        ("transfer_area", "transfer times inside an area", True),
        ("queuing_time", "queuing and action times in an area", True),
        ("service_factor", "exposure-weighted level of service", False),
        ("distance", "total and mean distance walked in an area", True),
        ("count_two_lines", "counts and flow across two or more lines", True),
        ("count_single_line", "counts and flow across one line", True),
        ("count_inside_area", "head count inside an area", True),
        ("filtering", "analysis filters by type, ids, destination, visits, action", True),
        ("social_cost", "monetised person-time by activity", False),
        ("export", "analysis and OD export to worksheet files", True),
        ("auto_analysis", "analyses computed at fixed intervals", False),
    ],
    "pres": [
        ("video", "video output at chosen simulation times", True),
        ("screenshots", "screenshots in common image formats", True),
        ("density_maps", "density maps with legend", True),
        ("sf_maps", "service factor maps with legend", False),
        ("utilization_maps", "utilization maps with legend", True),
        ("time_maps", "maps of last occupation time", True),
        ("charts", "in-platform chart drawing", False),
        ("color_scheme", "colour schemes to track entities", True),
        ("tracked_paths", "trails of tracked individuals", True),
        ("time_stamp", "time stamp printed on frames and images", True),
        ("auto_maps_charts", "maps and charts produced at fixed intervals", False),
    ],
    "veh": [
        ("vehicles_native", "vehicle traffic in the same platform", False),
        ("vehicles_imported", "imported vehicle simulation results", False),
        ("bicycles", "bicycle traffic", False),
        ("vehicle_pedestrian_interaction", "vehicle avoidance in shared space", False),
        ("non_compliant_users", "share of non-compliant pedestrians", False),
    ],
    "tech": [
        ("consistency_check", "automatic model consistency check", False),
        ("max_agents", "100,000 simultaneous agents", False),
        ("stability", "no crashes in operations and long runs", False),
        ("usability", "general interface usability", False),
        ("multiple_runs", "parallel simulation runs", False),
        ("seed", "manual or automatic seed change", False),
        ("batch_runs", "batch run launching", False),
    ],
    "val": [
        ("real_observations", "validated against field observations", False),
        ("default_fruin", "defaults consistent with Fruin LOS", False),
        ("calibration_guidelines", "case-by-case calibration with guidelines", True),
        ("certified", "third-party certified validation", False),
    ],
}


@dataclass(frozen=True)
class Checklist:
    items: tuple

    def __post_init__(self):
        ids = [i.id for i in self.items]
        if len(set(ids)) != len(ids):
            raise ChecklistError("checklist item ids must be unique")

    @property
    def ids(self):
        return [i.id for i in self.items]

    @property
    def categories(self):
        seen = []
        for i in self.items:
            if i.category not in seen:
                seen.append(i.category)
        return seen

    def item(self, item_id: str) -> ChecklistItem:
        for i in self.items:
            if i.id == item_id:
                return i
        raise ChecklistError(f"unknown checklist item {item_id!r}")

    def in_category(self, cat: str):
        return [i for i in self.items if i.category == cat]


def builtin_checklist() -> Checklist:
    items = []
    for cat, _ in CATEGORIES:
        for slug, desc, mand in _ITEMS[cat]:
            items.append(ChecklistItem(f"{cat}.{slug}", cat, desc, mand))
    return Checklist(tuple(items))


def _text(source) -> str:
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        return Path(source).read_text(encoding="utf-8")
    return source


def _read_pairs(source, value_name: str) -> dict:
    """id -> value from JSON ({"<value_name>s": {...}} or flat) or CSV (id,<value>)."""
    if isinstance(source, dict):
        return dict(source)
    text = _text(source)
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(text)
        for key in (value_name + "s", "answers", "mandatory"):
            if key in data and isinstance(data[key], dict):
                return dict(data[key])
        return dict(data)
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0][:2]] != ["id", value_name]:
        raise ChecklistError(f"expected CSV header 'id,{value_name}'")
    return {r[0].strip(): r[1].strip() for r in rows[1:] if r and r[0].strip()}


def _as_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "y"):
        return True
    if s in ("0", "false", "no", "n"):
        return False
    raise ChecklistError(f"not a boolean: {v!r}")


def load_checklist(override=None) -> Checklist:
    """Built-in checklist, optionally with mandatory flags flipped by an
    override (dict, JSON/CSV text or path with id,mandatory)."""
    base = builtin_checklist()
    if override is None:
        return base
    flags = _read_pairs(override, "mandatory")
    known = set(base.ids)
    bad = sorted(set(flags) - known)
    if bad:
        raise ChecklistError(f"unknown item id(s) in override: {', '.join(bad)}")
    items = tuple(replace(i, mandatory=_as_bool(flags[i.id])) if i.id in flags else i for i in base.items)
    return Checklist(items)


@dataclass(frozen=True)
class CapabilityManifest:
    product: str
    answers: dict

    def __post_init__(self):
        norm = {}
        for k, v in self.answers.items():
            a = str(v).strip().lower().replace(" ", "_")
            if a not in ANSWERS:
                raise ChecklistError(f"item {k}: answer must be one of {', '.join(ANSWERS)}")
            norm[k] = a
        object.__setattr__(self, "answers", norm)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", "answer"])
        for k in sorted(self.answers):
            w.writerow([k, self.answers[k]])
        return buf.getvalue()


def load_manifest(source, product: str | None = None) -> CapabilityManifest:
    name = product
    if isinstance(source, dict):
        name = name or source.get("product", "product")
        source = source.get("answers", source)
    else:
        text = _text(source)
        if name is None and text.lstrip().startswith("{"):
            name = json.loads(text).get("product")
        if name is None and text is not source:
            name = Path(source).stem
        source = text
    answers = _read_pairs(source, "answer")
    answers.pop("product", None)
    return CapabilityManifest(name or "product", answers)


@dataclass(frozen=True)
class CategoryScore:
    category: str
    items: int
    yes: int
    no: int
    under_development: int
    sufficient: bool
    missing_mandatory: tuple = ()
    mandatory_under_development: tuple = ()

    @property
    def completeness(self) -> float:
        return 100.0 * self.yes / self.items if self.items else 0.0


@dataclass(frozen=True)
class ScoreReport:
    product: str
    categories: tuple
    completeness: float
    counts: dict = field(default_factory=dict)

    @property
    def all_sufficient(self) -> bool:
        return all(c.sufficient for c in self.categories)

    def category(self, cat: str) -> CategoryScore:
        for c in self.categories:
            if c.category == cat:
                return c
        raise ChecklistError(f"unknown category {cat!r}")

    def lines(self):
        out = [f"product: {self.product}",
               f"completeness: {self.completeness:.1f}% "
               f"(yes {self.counts['yes']}, no {self.counts['no']}, "
               f"under development {self.counts['under_development']})"]
        for c in self.categories:
            state = "sufficient" if c.sufficient else "INSUFFICIENT"
            line = f"{c.category:5s} {CATEGORY_NAMES[c.category]:40s} {state:12s} {c.yes}/{c.items} yes"
            if c.missing_mandatory:
                line += " missing: " + ", ".join(c.missing_mandatory)
            if c.mandatory_under_development:
                line += " under development: " + ", ".join(c.mandatory_under_development)
            out.append(line)
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category", "name", "items", "yes", "no", "under_development", "completeness_pct",
                    "sufficient", "missing_mandatory"])
        for c in self.categories:
            w.writerow([c.category, CATEGORY_NAMES[c.category], c.items, c.yes, c.no, c.under_development,
                        f"{c.completeness:.1f}", int(c.sufficient), ";".join(c.missing_mandatory)])
        w.writerow(["all", "overall", sum(c.items for c in self.categories), self.counts["yes"],
                    self.counts["no"], self.counts["under_development"], f"{self.completeness:.1f}",
                    int(self.all_sufficient), ""])
        return buf.getvalue()


def score(manifest: CapabilityManifest, checklist: Checklist | None = None) -> ScoreReport:
    cl = checklist or builtin_checklist()
    missing = [i for i in cl.ids if i not in manifest.answers]
    if missing:
        raise ChecklistError(f"manifest lacks answers for: {', '.join(missing)}")
    extra = sorted(set(manifest.answers) - set(cl.ids))
    if extra:
        raise ChecklistError(f"manifest answers unknown items: {', '.join(extra)}")
    cats = []
    for cat in cl.categories:
        items = cl.in_category(cat)
        ans = [manifest.answers[i.id] for i in items]
        miss = tuple(i.id for i in items if i.mandatory and manifest.answers[i.id] != "yes")
        dev = tuple(i.id for i in items if i.mandatory and manifest.answers[i.id] == "under_development")
        cats.append(CategoryScore(cat, len(items), ans.count("yes"), ans.count("no"),
                                  ans.count("under_development"), not miss, miss, dev))
    counts = {a: sum(1 for i in cl.ids if manifest.answers[i] == a) for a in ANSWERS}
    return ScoreReport(manifest.product, tuple(cats), 100.0 * counts["yes"] / len(cl.ids), counts)


# -- self manifest -----------------------------------------------------------------

# item -> test that backs a "yes" (module::function).  Items absent here answer
# "no": they are declared non-goals or not implemented.
CAPABILITIES = {
    "2d.space_continuous": "test_engine.py::test_positions_are_continuous",
    "2d.cad_import_reference": "test_geometry.py::test_reference_layer_is_not_obstacle",
    "2d.cad_import_obstacle": "test_dxf.py::test_dxf_lines_become_obstacles",
    "2d.cad_manipulation": "test_geometry.py::test_transforms",
    "2d.cad_layers": "test_dxf.py::test_layers_survive_import",
    "2d.simulation_layers": "test_geometry.py::test_reference_layer_is_not_obstacle",
    "2d.cad_export": "test_dxf.py::test_dxf_round_trip",
    "2d.cad_copy_across_models": "test_geometry.py::test_copy_across_models",
    "2d.measuring_in_model": "test_geometry.py::test_measure",
    "vce.stairs": "test_engine.py::test_stairs_slow_agents",
    "vce.escalators": "test_engine.py::test_escalator_capacity",
    "obj.input_areas": "test_engine.py::test_spawn_boundary",
    "obj.exit_areas": "test_engine.py::test_sink_absorbs",
    "obj.target_areas": "test_engine.py::test_marker_split",
    "obj.waiting_areas": "test_engine.py::test_waiting_area_release",
    "obj.behaviour_zones": "test_engine.py::test_speed_zone",
    "obj.delay_areas": "test_engine.py::test_delay_area",
    "obj.target_kind_modifiers": "test_engine.py::test_set_target_zone",
    "obj.queuing_areas": "test_engine.py::test_queue_fifo",
    "obj.routes_fixed": "test_engine.py::test_marker_split",
    "obj.routes_dynamic": "test_scenario.py::test_condition_triggers",
    "obj.route_choice": "test_scenario.py::test_choose_next_rules",
    "obj.pedestrian_filtering": "test_scenario.py::test_filter_matches",
    "obj.dynamic_assignment": "test_engine.py::test_quickest_time_route",
    "od.input_csv": "test_demand.py::test_od_csv_round_trip",
    "od.import_timetable": "test_demand.py::test_timetable_profile",
    "od.import_spread": "test_demand.py::test_uniform_spread",
    "od.supply_types": "test_demand.py::test_supply_mix",
    "od.manipulation": "test_demand.py::test_edit_demand",
    "od.export": "test_demand.py::test_od_csv_round_trip",
    "od.multiple_settings": "test_demand.py::test_settings",
    "evac.evacuation_mode": "test_engine.py::test_evacuation_nearest_exit",
    "evac.reaction_time": "test_engine.py::test_evacuation_fixed_reaction",
    "evac.familiarity": "test_engine.py::test_unfamiliar_agents_use_known_exits",
    "ped.speed_distributed": "test_agents.py::test_speed_sampling_bounds",
    "ped.size_customizable": "test_agents.py::test_type_validation",
    "ped.luggage": "test_agents.py::test_luggage_scales_speed",
    "ped.prm": "test_agents.py::test_prm_type",
    "ped.agent_library": "test_agents.py::test_default_library",
    "ped.collision_avoidance": "test_acceptance.py::test_c6_collision_suite",
    "ped.moving_to_target": "test_acceptance.py::test_c5_free_flow",
    "ped.planned_activities": "test_engine.py::test_delay_area",
    "ped.knowledge_of_environment": "test_engine.py::test_unfamiliar_agents_use_known_exits",
    "ped.perceive_obstacles": "test_kernels.py::test_avoid_respects_walls",
    "ped.perceive_agents": "test_kernels.py::test_avoid_head_on",
    "ped.perceive_density": "test_engine.py::test_quickest_time_route",
    "ped.perceive_signals": "test_engine.py::test_waiting_area_release",
    "out.local_density": "test_analysis.py::test_local_density",
    "out.los_cmd": "test_analysis.py::test_cmd",
    "out.utilization": "test_analysis.py::test_utilization",
    "out.transfer_lines": "test_analysis.py::test_transfer_times",
    "out.transfer_area": "test_analysis.py::test_dwell_times",
    "out.queuing_time": "test_analysis.py::test_action_times",
    "out.service_factor": "test_analysis.py::test_service_factor",
    "out.distance": "test_analysis.py::test_distances",
    "out.count_two_lines": "test_analysis.py::test_pair_crossings",
    "out.count_single_line": "test_analysis.py::test_single_line_crossings",
    "out.count_inside_area": "test_analysis.py::test_count_inside",
    "out.filtering": "test_analysis.py::test_filter_partition",
    "out.social_cost": "test_analysis.py::test_social_cost",
    "out.export": "test_analysis.py::test_export_round_trip",
    "out.auto_analysis": "test_analysis.py::test_auto_analyses_in_run",
    "pres.video": "test_presentation.py::test_frame_count",
    "pres.density_maps": "test_presentation.py::test_density_map_cells",
    "pres.utilization_maps": "test_presentation.py::test_utilization_map",
    "pres.time_maps": "test_presentation.py::test_time_map_neutral",
    "pres.color_scheme": "test_presentation.py::test_trails_colors",
    "pres.tracked_paths": "test_presentation.py::test_trail_straight_run",
    "pres.time_stamp": "test_presentation.py::test_stamp_format",
    "tech.consistency_check": "test_scenario.py::test_validation_messages",
    "tech.max_agents": "test_acceptance.py::test_c3_capacity",
    "tech.stability": "test_acceptance.py::test_c1_conservation",
    "tech.multiple_runs": "test_engine.py::test_batch_parallel",
    "tech.seed": "test_engine.py::test_batch_seeds",
    "tech.batch_runs": "test_engine.py::test_batch_seeds",
    "val.default_fruin": "test_acceptance.py::test_c7_speed_density_and_los",
    "val.calibration_guidelines": "test_checklist.py::test_readme_has_calibration_guidance",
}

PRODUCT = "pedsim"


def self_manifest() -> CapabilityManifest:
    cl = builtin_checklist()
    return CapabilityManifest(PRODUCT, {i: ("yes" if i in CAPABILITIES else "no") for i in cl.ids})
