"""Scripted 2D worlds: semantic entities, ground-truth unsafe regions and scenario files.

A scenario is the simulator's environment and, at the same time, the scoring
oracle: every ground-truth region records which entity and which rule produced
it, so a violation can be traced back to the predicate that should have
prevented it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import shapely
import yaml
from shapely.geometry import LineString, Point, Polygon

from .predicate import CATEGORIES, SURFACE_CATEGORIES, Predicate, is_safe_predicate

RULES = ("near_buffer", "around_buffer", "between_hull", "off_surface")
RULE_OPERATOR = {
    "near_buffer": "NEAR",
    "around_buffer": "AROUND",
    "between_hull": "BETWEEN",
    "off_surface": "ON",
}
DEFAULT_BUFFERS = {"near": 0.3, "around": 1.0}
DEFAULT_SAFE_RADIUS = 0.5

BUILTIN_DIR = Path(__file__).parent / "scenarios"


class ScenarioError(ValueError):
    """Base class for scenario loading problems."""


class ScenarioParseError(ScenarioError):
    """The file is not a well-formed scenario document."""


class ScenarioValidationError(ScenarioError):
    """The document parsed but violates a scenario invariant."""

    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass(frozen=True)
class Entity:
    id: str
    class_label: str
    footprint: Polygon
    height: float
    category: str

    @property
    def is_surface(self) -> bool:
        return self.category in SURFACE_CATEGORIES

    def validate(self, where: str = "entities") -> None:
        if self.category not in CATEGORIES:
            raise ScenarioValidationError(f"{where}.category", f"unknown category {self.category!r}")
        if not math.isfinite(self.height) or self.height < 0:
            raise ScenarioValidationError(f"{where}.height", f"height must be >= 0, got {self.height}")
        if (self.height == 0) != self.is_surface:
            raise ScenarioValidationError(
                f"{where}.height", "height is 0 exactly for surface categories"
            )
        fp = self.footprint
        if not fp.is_valid or fp.area <= 0:
            raise ScenarioValidationError(f"{where}.footprint", "footprint must be a valid polygon with area > 0")
        if not self.is_surface and fp.convex_hull.area - fp.area > 1e-9 * max(1.0, fp.area):
            raise ScenarioValidationError(f"{where}.footprint", "obstacle footprints must be convex")


@dataclass(frozen=True)
class GroundTruthRegion:
    polygon: Polygon
    source_entity: str
    rule: str

    @property
    def operator(self) -> str:
        return RULE_OPERATOR[self.rule]


@dataclass(frozen=True)
class Scenario:
    name: str
    entities: tuple[Entity, ...]
    ground_truth_unsafe: tuple[GroundTruthRegion, ...]
    start_pose: tuple[float, float, float]
    waypoints: tuple[tuple[float, float], ...]
    task_label: str
    scripted_predicates: Mapping[str, tuple[Predicate, ...]]
    safe_radius: float = DEFAULT_SAFE_RADIUS
    buffers: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_BUFFERS))
    description: str = ""

    def entity(self, entity_id: str) -> Entity:
        return self._by_id[entity_id]

    @cached_property
    def _by_id(self) -> dict[str, Entity]:
        return {e.id: e for e in self.entities}

    @cached_property
    def class_labels(self) -> tuple[str, ...]:
        """Sorted class names; label image index ``i + 1`` refers to ``class_labels[i]``."""
        labels = {e.class_label for e in self.entities} | {"floor"}
        return tuple(sorted(labels))

    def category_of(self, class_label: str) -> str | None:
        for e in self.entities:
            if e.class_label == class_label:
                return e.category
        return "navigable_surface" if class_label == "floor" else None

    @property
    def obstacles(self) -> tuple[Entity, ...]:
        return tuple(e for e in self.entities if not e.is_surface)

    @property
    def surfaces(self) -> tuple[Entity, ...]:
        return tuple(e for e in self.entities if e.is_surface)

    @cached_property
    def _unsafe_union(self):
        polys = [r.polygon for r in self.ground_truth_unsafe]
        geom = shapely.union_all(polys) if polys else shapely.Polygon()
        shapely.prepare(geom)
        return geom

    @cached_property
    def _navigable_union(self):
        polys = [e.footprint for e in self.entities if e.category == "navigable_surface"]
        if not polys:
            return None
        geom = shapely.union_all(polys)
        shapely.prepare(geom)
        return geom

    def path(self) -> LineString:
        pts = [self.start_pose[:2], *self.waypoints]
        if len(pts) == 1:
            pts = pts * 2
        return LineString(pts)

    def bounds(self) -> tuple[float, float, float, float]:
        """Bounding box of the start pose, waypoints and non-surface entities."""
        pts = [self.start_pose[:2], *self.waypoints]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        for e in self.obstacles:
            x0, y0, x1, y1 = e.footprint.bounds
            xs += [x0, x1]
            ys += [y0, y1]
        for r in self.ground_truth_unsafe:
            x0, y0, x1, y1 = r.polygon.bounds
            # surfaces may tile the plane; only let nearby regions widen the box
            xs += [max(x0, min(xs) - 10), min(x1, max(xs) + 10)]
            ys += [max(y0, min(ys) - 10), min(y1, max(ys) + 10)]
        return min(xs), min(ys), max(xs), max(ys)

    def regions_at(self, p: Sequence[float]) -> list[GroundTruthRegion]:
        pt = Point(float(p[0]), float(p[1]))
        return [r for r in self.ground_truth_unsafe if r.polygon.intersects(pt)]


def ground_truth_safe(scenario: Scenario, p: Sequence[float]) -> bool:
    """True iff ``p`` is in no ground-truth unsafe region and, when the scenario
    declares navigable surfaces, lies on one of them. Region boundaries count as unsafe."""
    return bool(ground_truth_safe_many(scenario, np.asarray(p, dtype=float)[None, :2])[0])


def ground_truth_safe_many(scenario: Scenario, xy: np.ndarray) -> np.ndarray:
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    x, y = xy[:, 0], xy[:, 1]
    safe = ~shapely.intersects_xy(scenario._unsafe_union, x, y)
    nav = scenario._navigable_union
    if nav is not None:
        safe &= shapely.intersects_xy(nav, x, y)
    return safe


# ---------------------------------------------------------------------------
# ground-truth derivation


def derive_unsafe_regions(
    entities: Sequence[Entity],
    scripted_predicates: Mapping[str, Sequence[Predicate]],
    buffers: Mapping[str, float] | None = None,
) -> list[GroundTruthRegion]:
    """Materialize the regions a perfect contextual reasoner's predicates denote.

    NEAR inflates the footprint by the near buffer, AROUND by the around buffer,
    BETWEEN takes the convex hull over every entity of that class, and ON over a
    non-navigable surface marks the whole surface.
    """
    buf = dict(DEFAULT_BUFFERS)
    buf.update(buffers or {})
    by_id = {e.id: e for e in entities}
    regions: list[GroundTruthRegion] = []
    between_done: set[str] = set()
    for eid, preds in scripted_predicates.items():
        ent = by_id[eid]
        for pred in preds:
            if is_safe_predicate(pred, ent.category):
                continue
            if pred.operator == "NEAR":
                regions.append(GroundTruthRegion(ent.footprint.buffer(buf["near"]), eid, "near_buffer"))
            elif pred.operator == "AROUND":
                regions.append(GroundTruthRegion(ent.footprint.buffer(buf["around"]), eid, "around_buffer"))
            elif pred.operator == "BETWEEN":
                if pred.class_label in between_done:
                    continue
                between_done.add(pred.class_label)
                members = [e for e in entities if e.class_label == pred.class_label]
                hull = shapely.union_all([e.footprint for e in members]).convex_hull
                regions.append(GroundTruthRegion(hull, members[0].id, "between_hull"))
            elif pred.operator == "ON":
                regions.append(GroundTruthRegion(ent.footprint, eid, "off_surface"))
    return regions


# ---------------------------------------------------------------------------
# validation


def validate_scenario(sc: Scenario) -> None:
    if not sc.name:
        raise ScenarioValidationError("name", "must be non-empty")
    ids = [e.id for e in sc.entities]
    if len(set(ids)) != len(ids):
        raise ScenarioValidationError("entities.id", "entity ids must be unique")
    for i, e in enumerate(sc.entities):
        e.validate(f"entities[{i}]")
    for i, r in enumerate(sc.ground_truth_unsafe):
        if r.rule not in RULES:
            raise ScenarioValidationError(f"unsafe_regions[{i}].rule", f"unknown rule {r.rule!r}")
        if r.source_entity not in sc._by_id:
            raise ScenarioValidationError(
                f"unsafe_regions[{i}].source_entity", f"no entity {r.source_entity!r}"
            )
        if not r.polygon.is_valid or r.polygon.area <= 0:
            raise ScenarioValidationError(f"unsafe_regions[{i}].polygon", "must be a valid polygon with area > 0")
    if not all(math.isfinite(v) for v in sc.start_pose):
        raise ScenarioValidationError("start_pose", "must be finite")
    if sc.safe_radius <= 0:
        raise ScenarioValidationError("safe_radius", "must be > 0")
    if not sc.waypoints:
        raise ScenarioValidationError("waypoints", "at least one waypoint is required")
    if sc.task_label not in ("safe", "unsafe"):
        raise ScenarioValidationError("task_label", f"must be 'safe' or 'unsafe', got {sc.task_label!r}")
    for eid, preds in sc.scripted_predicates.items():
        if eid not in sc._by_id:
            raise ScenarioValidationError("scripted_predicates", f"no entity {eid!r}")
        ent = sc._by_id[eid]
        for pred in preds:
            if pred.class_label != ent.class_label:
                raise ScenarioValidationError(
                    "scripted_predicates", f"{pred} does not refer to the class of entity {eid!r}"
                )
            if pred.operator == "ON" and not ent.is_surface:
                raise ScenarioValidationError("scripted_predicates", f"{pred}: ON applies to surfaces only")

    start = Point(sc.start_pose[0], sc.start_pose[1])
    for i, r in enumerate(sc.ground_truth_unsafe):
        if r.polygon.distance(start) < sc.safe_radius:
            raise ScenarioValidationError(
                "start_pose",
                f"start lies within {sc.safe_radius} m of unsafe region {i} ({r.rule} of {r.source_entity})",
            )
    if sc._navigable_union is not None and not sc._navigable_union.intersects(start):
        raise ScenarioValidationError("start_pose", "start is not on a navigable surface")

    path = sc.path()
    crosses = any(r.polygon.intersects(path) for r in sc.ground_truth_unsafe)
    nav = sc._navigable_union
    if nav is not None and not nav.covers(path):
        crosses = True
    if crosses != (sc.task_label == "unsafe"):
        raise ScenarioValidationError(
            "task_label",
            f"labelled {sc.task_label!r} but the waypoint path "
            f"{'intersects' if crosses else 'avoids'} the unsafe regions",
        )


# ---------------------------------------------------------------------------
# (de)serialization


def _polygon(coords, where: str) -> Polygon:
    try:
        pts = [(float(x), float(y)) for x, y in coords]
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"{where}: expected a list of [x, y] pairs") from exc
    if len(pts) < 3:
        raise ScenarioValidationError(where, "a polygon needs at least 3 vertices")
    return Polygon(pts)


def _coords(poly: Polygon) -> list[list[float]]:
    return [[float(x), float(y)] for x, y in list(poly.exterior.coords)[:-1]]


def scenario_from_dict(doc: Mapping) -> Scenario:
    if not isinstance(doc, Mapping):
        raise ScenarioParseError("scenario document must be a mapping")
    required = ("name", "entities", "start_pose", "waypoints", "task_label")
    for key in required:
        if key not in doc:
            raise ScenarioParseError(f"missing top-level key {key!r}")
    try:
        entities = tuple(
            Entity(
                id=str(e["id"]),
                class_label=str(e["class_label"]),
                footprint=_polygon(e["footprint"], f"entities[{i}].footprint"),
                height=float(e.get("height", 0.0)),
                category=str(e["category"]),
            )
            for i, e in enumerate(doc.get("entities") or [])
        )
        regions = tuple(
            GroundTruthRegion(
                polygon=_polygon(r["polygon"], f"unsafe_regions[{i}].polygon"),
                source_entity=str(r["source_entity"]),
                rule=str(r["rule"]),
            )
            for i, r in enumerate(doc.get("unsafe_regions") or [])
        )
        preds = {
            str(k): tuple(Predicate.parse(p) for p in v)
            for k, v in (doc.get("scripted_predicates") or {}).items()
        }
        start = tuple(float(v) for v in doc["start_pose"])
        waypoints = tuple((float(w[0]), float(w[1])) for w in doc["waypoints"] or [])
    except KeyError as exc:
        raise ScenarioParseError(f"missing field {exc.args[0]!r}") from exc
    except (TypeError, IndexError) as exc:
        raise ScenarioParseError(f"malformed scenario document: {exc}") from exc
    except ValueError as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioParseError(str(exc)) from exc
    if len(start) != 3:
        raise ScenarioParseError("start_pose must be [x, y, theta]")
    buffers = dict(DEFAULT_BUFFERS)
    buffers.update({k: float(v) for k, v in (doc.get("buffers") or {}).items()})
    sc = Scenario(
        name=str(doc["name"]),
        entities=entities,
        ground_truth_unsafe=regions,
        start_pose=start,  # type: ignore[arg-type]
        waypoints=waypoints,
        task_label=str(doc["task_label"]),
        scripted_predicates=preds,
        safe_radius=float(doc.get("safe_radius", DEFAULT_SAFE_RADIUS)),
        buffers=buffers,
        description=str(doc.get("description", "")),
    )
    validate_scenario(sc)
    return sc


def scenario_to_dict(sc: Scenario) -> dict:
    return {
        "name": sc.name,
        "description": sc.description,
        "safe_radius": sc.safe_radius,
        "buffers": dict(sc.buffers),
        "entities": [
            {
                "id": e.id,
                "class_label": e.class_label,
                "category": e.category,
                "height": e.height,
                "footprint": _coords(e.footprint),
            }
            for e in sc.entities
        ],
        "unsafe_regions": [
            {"rule": r.rule, "source_entity": r.source_entity, "polygon": _coords(r.polygon)}
            for r in sc.ground_truth_unsafe
        ],
        "start_pose": list(sc.start_pose),
        "waypoints": [list(w) for w in sc.waypoints],
        "task_label": sc.task_label,
        "scripted_predicates": {k: [str(p) for p in v] for k, v in sc.scripted_predicates.items()},
    }


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from exc
    return scenario_from_dict(doc)


def save_scenario(sc: Scenario, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(scenario_to_dict(sc), sort_keys=False))


def builtin_names() -> list[str]:
    return [p.stem.split("_", 1)[1] for p in sorted(BUILTIN_DIR.glob("*.yaml"))]


def builtin_scenarios() -> list[Scenario]:
    """The twelve task scenarios, in task order (six unsafe, then six safe)."""
    return [load_scenario(p) for p in sorted(BUILTIN_DIR.glob("*.yaml"))]


def get_builtin(name: str) -> Scenario:
    matches = [p for p in BUILTIN_DIR.glob("*.yaml") if p.stem.split("_", 1)[1] == name]
    if not matches:
        raise KeyError(name)
    return load_scenario(matches[0])


def polygon_from_points(points: Iterable[Sequence[float]]) -> Polygon:
    return Polygon([(float(x), float(y)) for x, y in points])
