"""Synthetic RGB-D sensing and the stochastic perception oracle.

The renderer casts one pinhole ray per pixel against the ground plane and the
extruded entity footprints and returns a class-label image plus a z-depth
image. The oracle stands in for the vision-language model: each visible entity
is detected with probability ``m_D(r)`` and, when detected, contributes its
scripted predicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import Point
from shapely.geometry.polygon import orient

from .predicate import Predicate, is_safe_predicate
from .world import Scenario


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera rigidly mounted on the robot.

    Defaults are the simulated camera intrinsics (500 x 320 image), mounted
    0.7 m above the ground and pitched 0.2 rad down.
    """

    fx: float = 274.9
    fy: float = 376.7
    cx: float = 250.0
    cy: float = 160.0
    width: int = 500
    height: int = 320
    mount_height: float = 0.7
    pitch: float = 0.2
    body_offset: float = 0.3

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def rotation(self, theta: float) -> np.ndarray:
        """World-from-camera rotation; columns are the camera x (right), y (down), z (optical) axes."""
        c, s = math.cos(theta), math.sin(theta)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        fwd = np.array([c, s, 0.0])
        left = np.array([-s, c, 0.0])
        up = np.array([0.0, 0.0, 1.0])
        x_axis = -left
        y_axis = -cp * up - sp * fwd
        z_axis = cp * fwd - sp * up
        return np.column_stack([x_axis, y_axis, z_axis])

    def center(self, pose: Sequence[float]) -> np.ndarray:
        x, y, theta = pose
        return np.array(
            [x + self.body_offset * math.cos(theta), y + self.body_offset * math.sin(theta), self.mount_height]
        )


SPOT_CAMERA = CameraModel(fx=552.0, fy=552.0, cx=320.0, cy=240.0, width=640, height=480)


@dataclass
class Frame:
    labels: np.ndarray  # (height, width) uint16 class index, 0 = background
    depth: np.ndarray  # (height, width) z-depth in meters, inf where nothing was hit
    timestamp: float
    camera_pose: tuple[float, float, float]
    classes: tuple[str, ...]  # label index i + 1 -> classes[i]
    instances: np.ndarray | None = None  # (height, width) entity index, -1 for none
    frame_id: int = 0

    def __post_init__(self):
        if self.labels.shape != self.depth.shape:
            raise ValueError("label and depth images must have identical dimensions")

    def class_index(self, class_label: str) -> int:
        try:
            return self.classes.index(class_label) + 1
        except ValueError:
            return -1

    def class_mask(self, class_label: str) -> np.ndarray:
        idx = self.class_index(class_label)
        if idx < 0:
            return np.zeros(self.labels.shape, dtype=bool)
        return self.labels == idx

    def class_masks(self) -> dict[str, np.ndarray]:
        present = np.unique(self.labels)
        return {self.classes[i - 1]: self.labels == i for i in present if i > 0}


# ---------------------------------------------------------------------------
# projection


def pixel_to_point(u, v, d, cam: CameraModel) -> np.ndarray:
    """Back-project pixel ``(u, v)`` at z-depth ``d`` into the camera frame.

    Works elementwise on arrays; the last axis of the result is (x, y, z).
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    d = np.asarray(d, dtype=float)
    if np.any(~(d > 0)):
        raise ValueError("depth must be positive")
    return np.stack([d * (u - cam.cx) / cam.fx, d * (v - cam.cy) / cam.fy, d], axis=-1)


def camera_to_world(points: np.ndarray, pose: Sequence[float], cam: CameraModel) -> np.ndarray:
    return np.asarray(points) @ cam.rotation(pose[2]).T + cam.center(pose)


def range_gate_mask(points: np.ndarray, min_range: float = 3.0, max_range: float = 7.0, origin=(0.0, 0.0)) -> np.ndarray:
    if min_range > max_range:
        raise ValueError(f"min_range {min_range} exceeds max_range {max_range}")
    pts = np.asarray(points, dtype=float)
    r = np.hypot(pts[..., 0] - origin[0], pts[..., 1] - origin[1])
    return (r >= min_range) & (r <= max_range)


def range_gate(points: np.ndarray, min_range: float = 3.0, max_range: float = 7.0, origin=(0.0, 0.0), labels=None):
    """Keep points whose planar distance from ``origin`` (the robot) lies in ``[min_range, max_range]``."""
    keep = range_gate_mask(points, min_range, max_range, origin)
    pts = np.asarray(points)[keep]
    if labels is None:
        return pts
    return pts, np.asarray(labels)[keep]


# ---------------------------------------------------------------------------
# rendering


def _pixel_rays(cam: CameraModel) -> np.ndarray:
    v, u = np.mgrid[0 : cam.height, 0 : cam.width]
    return np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones(u.shape)], axis=-1)


_RAY_CACHE: dict[CameraModel, np.ndarray] = {}


def _rays(cam: CameraModel) -> np.ndarray:
    if cam not in _RAY_CACHE:
        _RAY_CACHE[cam] = _pixel_rays(cam)
    return _RAY_CACHE[cam]


def _prism_hits(origin, dirs, footprint, height):
    """Entry parameter of each ray into the extruded convex footprint (inf when missed)."""
    verts = np.asarray(orient(footprint).exterior.coords)[:-1]
    n = len(dirs)
    t_lo = np.full(n, 1e-9)
    t_hi = np.full(n, np.inf)
    ok = np.ones(n, dtype=bool)

    def clip(a, b):
        # constraint a + t * b <= 0
        nonlocal t_lo, t_hi, ok
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -a / b
        pos = b > 0
        neg = b < 0
        t_hi = np.where(pos, np.minimum(t_hi, t), t_hi)
        t_lo = np.where(neg, np.maximum(t_lo, t), t_lo)
        ok &= ~((b == 0) & (a > 0))

    for k in range(len(verts)):
        p0 = verts[k]
        p1 = verts[(k + 1) % len(verts)]
        normal = np.array([p1[1] - p0[1], -(p1[0] - p0[0])])
        a = normal @ (origin[:2] - p0)
        b = dirs[:, :2] @ normal
        clip(np.full(n, a), b)
    clip(np.full(n, -origin[2]), -dirs[:, 2])  # z >= 0
    clip(np.full(n, origin[2] - height), dirs[:, 2])  # z <= height
    hit = ok & (t_lo <= t_hi) & np.isfinite(t_lo)
    return np.where(hit, t_lo, np.inf)


def _entity_pixel_box(entity, R, C, cam):
    """Pixel bounding box of the entity's projected corners, or None to test the whole image."""
    verts = np.asarray(entity.footprint.exterior.coords)[:-1]
    corners = np.concatenate(
        [np.c_[verts, np.zeros(len(verts))], np.c_[verts, np.full(len(verts), entity.height)]]
    )
    pc = (corners - C) @ R
    if np.any(pc[:, 2] < 0.05):
        return None
    u = cam.fx * pc[:, 0] / pc[:, 2] + cam.cx
    v = cam.fy * pc[:, 1] / pc[:, 2] + cam.cy
    u0, u1 = int(math.floor(u.min())) - 1, int(math.ceil(u.max())) + 1
    v0, v1 = int(math.floor(v.min())) - 1, int(math.ceil(v.max())) + 1
    u0, v0 = max(u0, 0), max(v0, 0)
    u1, v1 = min(u1, cam.width - 1), min(v1, cam.height - 1)
    if u0 > u1 or v0 > v1:
        return ()
    return (slice(v0, v1 + 1), slice(u0, u1 + 1))


def render_frame(
    scenario: Scenario, robot_pose: Sequence[float], cam: CameraModel = CameraModel(), timestamp: float = 0.0,
    frame_id: int = 0,
) -> Frame:
    """Label and z-depth images seen from ``robot_pose``.

    Ground hits are labelled with the last-declared surface entity covering the
    hit point, or ``floor`` when no surface covers it.
    """
    pose = tuple(float(v) for v in robot_pose)
    if not all(math.isfinite(v) for v in pose):
        raise ValueError("robot pose must be finite")
    R = cam.rotation(pose[2])
    C = cam.center(pose)
    dirs = _rays(cam) @ R.T  # (H, W, 3) world directions with unit z-depth
    classes = scenario.class_labels
    depth = np.full((cam.height, cam.width), np.inf)
    inst = np.full((cam.height, cam.width), -1, dtype=np.int32)

    # ground plane
    dz = dirs[..., 2]
    with np.errstate(divide="ignore"):
        tg = np.where(dz < 0, -C[2] / dz, np.inf)
    depth[:] = tg
    ground = np.isfinite(tg)

    for idx, ent in enumerate(scenario.entities):
        if ent.is_surface:
            continue
        window = _entity_pixel_box(ent, R, C, cam)
        if window == ():
            continue
        if window is None:
            window = (slice(None), slice(None))
        sub = dirs[window]
        t = _prism_hits(C, sub.reshape(-1, 3), ent.footprint, ent.height).reshape(sub.shape[:2])
        closer = t < depth[window]
        if not closer.any():
            continue
        depth[window] = np.where(closer, t, depth[window])
        inst[window] = np.where(closer, idx, inst[window])
        ground[window] &= ~closer

    labels = np.zeros((cam.height, cam.width), dtype=np.uint16)
    obstacle = inst >= 0
    if obstacle.any():
        ent_class = np.array([classes.index(e.class_label) + 1 for e in scenario.entities], dtype=np.uint16)
        labels[obstacle] = ent_class[inst[obstacle]]

    if ground.any():
        gv, gu = np.nonzero(ground)
        t = depth[gv, gu]
        hx = C[0] + t * dirs[gv, gu, 0]
        hy = C[1] + t * dirs[gv, gu, 1]
        g_label = np.full(len(gv), classes.index("floor") + 1, dtype=np.uint16)
        g_inst = np.full(len(gv), -1, dtype=np.int32)
        for idx, ent in enumerate(scenario.entities):
            if not ent.is_surface:
                continue
            inside = shapely.contains_xy(ent.footprint, hx, hy)
            g_label[inside] = classes.index(ent.class_label) + 1
            g_inst[inside] = idx
        labels[gv, gu] = g_label
        inst[gv, gu] = g_inst
    return Frame(labels, depth, float(timestamp), pose, classes, inst, frame_id)  # type: ignore[arg-type]


def frame_points(frame: Frame, cam: CameraModel, mask: np.ndarray | None = None):
    """World points of the (masked) pixels with finite depth; returns (points, (v, u))."""
    sel = np.isfinite(frame.depth)
    if mask is not None:
        sel &= mask
    v, u = np.nonzero(sel)
    if len(v) == 0:
        return np.empty((0, 3)), (v, u)
    pts = camera_to_world(pixel_to_point(u, v, frame.depth[v, u], cam), frame.camera_pose, cam)
    return pts, (v, u)


# ---------------------------------------------------------------------------
# detection model and oracle


@dataclass(frozen=True)
class DetectionModel:
    """Bernoulli detection probability ``m_D(r) = max(0, p0 - epsilon * r / D)`` for ``r < D``, 0 beyond.

    ``min_range``/``max_range`` are the depth band the grounding keeps.
    """

    p0: float = 0.75
    epsilon: float = 1e-3
    D: float = 7.0
    min_range: float = 3.0
    max_range: float = 7.0

    def __post_init__(self):
        if not (0.0 <= self.p0 <= 1.0):
            raise ValueError("p0 must lie in [0, 1]")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.D <= 0:
            raise ValueError("sensing radius D must be positive")
        if self.min_range > self.max_range:
            raise ValueError("min_range exceeds max_range")

    def __call__(self, r):
        r = np.asarray(r, dtype=float)
        m = np.where(r < self.D, np.maximum(0.0, self.p0 - self.epsilon * r / self.D), 0.0)
        return m if m.ndim else float(m)

    @property
    def satisfies_assumptions(self) -> bool:
        """Bounded radius holds by construction; also require ``0 < m < 1`` on (0, D) and strict decrease."""
        return 0.0 < self.p0 - self.epsilon and self.p0 < 1.0 and self.epsilon > 0.0

    @property
    def is_perfect(self) -> bool:
        """``m_D(r) = 1[r < D]`` exactly."""
        return self.p0 == 1.0 and self.epsilon == 0.0


@dataclass(frozen=True)
class PerceptionEvent:
    predicates_safe: tuple[Predicate, ...]
    predicates_unsafe: tuple[Predicate, ...]
    frame_id: int
    capture_time: float
    delivery_time: float
    detections: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.delivery_time < self.capture_time:
            raise ValueError("delivery cannot precede capture")

    @property
    def latency(self) -> float:
        return self.delivery_time - self.capture_time


def visible_entities(frame: Frame) -> list[int]:
    if frame.instances is None:
        return []
    ids = np.unique(frame.instances)
    return [int(i) for i in ids if i >= 0]


def entity_distance(scenario: Scenario, entity_index: int, pose: Sequence[float]) -> float:
    """Planar distance from the robot to the nearest point of the entity footprint."""
    return float(scenario.entities[entity_index].footprint.distance(Point(pose[0], pose[1])))


def _dedupe(preds):
    seen = []
    for p in preds:
        if p not in seen:
            seen.append(p)
    return tuple(seen)


def oracle_predicates(
    scenario: Scenario,
    frame: Frame,
    model: DetectionModel,
    rng: np.random.Generator,
    latency: float = 0.0,
) -> PerceptionEvent:
    """Stochastic stand-in for contextual reasoning on one frame.

    Navigable-surface predicates are always emitted. Every other visible entity
    is detected independently with probability ``model(r)``.
    """
    safe, unsafe, detections = [], [], {}
    visible = visible_entities(frame)
    for idx in visible:
        ent = scenario.entities[idx]
        preds = scenario.scripted_predicates.get(ent.id, ())
        if ent.category == "navigable_surface":
            safe.extend(p for p in preds if is_safe_predicate(p, ent.category))
            continue
        r = entity_distance(scenario, idx, frame.camera_pose)
        hit = bool(rng.random() < model(r))
        detections[ent.id] = hit
        if hit:
            for p in preds:
                (safe if is_safe_predicate(p, ent.category) else unsafe).append(p)
    if not any(e.category == "navigable_surface" for e in scenario.entities) and frame.class_index("floor") > 0:
        if np.any(frame.labels == frame.class_index("floor")):
            safe.append(Predicate("ON", "floor"))
    return PerceptionEvent(
        _dedupe(safe), _dedupe(unsafe), frame.frame_id, frame.timestamp, frame.timestamp + latency, detections
    )


def latency_schedule(period: float, latency: float, horizon: float) -> list[tuple[float, float]]:
    """(capture, delivery) time pairs: a capture every ``period`` s before ``horizon``."""
    if period <= 0:
        raise ValueError("period must be positive")
    if latency < 0:
        raise ValueError("latency must be >= 0")
    out = []
    k = 0
    while k * period < horizon - 1e-12:
        t = k * period
        out.append((t, t + latency))
        k += 1
    return out


# ---------------------------------------------------------------------------
# debug export


def write_frame(frame: Frame, cam: CameraModel, prefix: str | Path) -> None:
    """Raw row-major rasters (``.labels.u16``, ``.depth.f32``) plus a text header."""
    prefix = Path(prefix)
    frame.labels.astype("<u2").tofile(f"{prefix}.labels.u16")
    frame.depth.astype("<f4").tofile(f"{prefix}.depth.f32")
    header = [
        f"width {cam.width}",
        f"height {cam.height}",
        f"fx {cam.fx!r}",
        f"fy {cam.fy!r}",
        f"cx {cam.cx!r}",
        f"cy {cam.cy!r}",
        f"pose {' '.join(repr(float(v)) for v in frame.camera_pose)}",
        f"timestamp {frame.timestamp!r}",
        f"classes {' '.join(frame.classes)}",
    ]
    Path(f"{prefix}.txt").write_text("\n".join(header) + "\n")


def read_frame(prefix: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    prefix = Path(prefix)
    header = {}
    for line in Path(f"{prefix}.txt").read_text().splitlines():
        key, _, value = line.partition(" ")
        header[key] = value
    w, h = int(header["width"]), int(header["height"])
    labels = np.fromfile(f"{prefix}.labels.u16", dtype="<u2").reshape(h, w)
    depth = np.fromfile(f"{prefix}.depth.f32", dtype="<f4").reshape(h, w)
    return labels, depth, header
