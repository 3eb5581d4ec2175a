"""Closed-loop episodes: perception, grounding and the safety filter around a waypoint follower.

Four modes share the control stack and differ only in where constraints come from:

``core``
    stochastic contextual predicates (detection model) grounded online;
``oracle``
    ground-truth unsafe regions written into the grid before the first tick;
``no_context``
    a fixed rule ``NEAR(c)`` for every visible metric-obstacle class;
``geometric``
    depth points above the traversable step height, nothing semantic.
"""

from __future__ import annotations

import csv
import io
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .grounding import (
    DILATION_KERNEL,
    Barrier,
    SafetyGrid,
    barrier_value,
    compose_image_safe_set,
    ground_predicates,
    project_and_accumulate,
    rebuild_safe_set,
)
from .predicate import Predicate
from .safety_filter import (
    ZERO_INPUT,
    ControlInput,
    FilterDiagnostics,
    InputBounds,
    RobotState,
    filter_step,
    step_dynamics,
)
from .sensor import CameraModel, DetectionModel, Frame, PerceptionEvent, frame_points, oracle_predicates, render_frame
from .world import Scenario, builtin_scenarios, get_builtin, ground_truth_safe_many

MODES = ("core", "oracle", "no_context", "geometric")
ATTRIBUTIONS = ("none", "ctx", "grnd", "enf")


@dataclass(frozen=True)
class ControllerGains:
    kp: float = 0.5  # 1/s, body-frame position error to velocity
    k_heading: float = 1.0  # 1/s, bearing to yaw rate
    ki: float = 0.0
    kd: float = 0.0
    tolerance: float = 0.3  # m, waypoint acceptance radius


def nominal_controller(
    s: RobotState,
    waypoints: Sequence[Sequence[float]],
    gains: ControllerGains = ControllerGains(),
    index: int = 0,
    bounds: InputBounds = InputBounds(),
) -> tuple[ControlInput, int]:
    """Proportional pursuit of the active waypoint.

    Returns the command and the updated waypoint index; the index equals
    ``len(waypoints)`` once the last waypoint is within tolerance, after which
    the command is zero. The integral and derivative gains are accepted for
    completeness but the loop is stateless, so only the proportional terms act.
    """
    if not waypoints:
        raise ValueError("need at least one waypoint")
    n = len(waypoints)
    while index < n:
        dx, dy = waypoints[index][0] - s.x, waypoints[index][1] - s.y
        if math.hypot(dx, dy) >= gains.tolerance:
            break
        index += 1
    if index >= n:
        return ZERO_INPUT, n
    c, sn = math.cos(s.theta), math.sin(s.theta)
    ex, ey = c * dx + sn * dy, -sn * dx + c * dy
    vx, vy = gains.kp * ex, gains.kp * ey
    speed = math.hypot(vx, vy)
    if speed > bounds.v_max:
        vx, vy = vx * bounds.v_max / speed, vy * bounds.v_max / speed
    bearing = math.atan2(ey, ex)
    omega = min(max(gains.k_heading * bearing, -bounds.omega_max), bounds.omega_max)
    return ControlInput(vx, vy, omega), index


@dataclass(frozen=True)
class EpisodeConfig:
    """Everything that determines an episode; two equal configs give bit-identical logs."""

    scenario: str
    mode: str = "core"
    seed: int = 0
    frame_period: float = 3.0  # s between captures
    latency: float = 3.0  # s from capture to delivery
    detection: DetectionModel = DetectionModel()
    camera: CameraModel = CameraModel()
    resolution: float = 0.2  # m per cell
    tau: float = 0.5
    treat_unknown: str = "safe"
    kernel: int = DILATION_KERNEL  # px
    slope: float = 0.25  # 1/s, class-K slope
    clearance: float = 0.2  # m subtracted from h inside the filter
    active_band: float | None = 0.2  # m; None enforces only the nearest boundary center
    dt: float = 0.1  # s
    bounds: InputBounds = InputBounds()
    gains: ControllerGains = ControllerGains()
    horizon: float | None = None  # s; None scales with path length
    start_radius: float = 0.5  # m
    step_height: float = 0.25  # m, geometric mode's traversable height
    filter_enabled: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.horizon is not None and not self.horizon > 0:
            raise ValueError("horizon must be positive")
        if not (self.dt > 0 and self.frame_period > 0 and self.latency >= 0):
            raise ValueError("dt and frame period must be positive and latency nonnegative")
        if self.start_radius < 0:
            raise ValueError("start radius must be nonnegative")

    def horizon_for(self, sc: Scenario) -> float:
        if self.horizon is not None:
            return self.horizon
        return 1.5 * sc.path().length / self.bounds.v_max + 15.0


@dataclass(frozen=True)
class DeliveryRecord:
    frame_id: int
    capture_time: float
    delivery_time: float
    predicates_safe: tuple[Predicate, ...]
    predicates_unsafe: tuple[Predicate, ...]
    grounding_failures: tuple[Predicate, ...]
    assumption_violation: bool


@dataclass
class TrajectoryLog:
    scenario: str
    mode: str
    seed: int
    dt: float
    rows: list[tuple] = field(default_factory=list)
    deliveries: list[DeliveryRecord] = field(default_factory=list)
    violation_time: float | None = None
    violation_position: tuple[float, float] | None = None
    violation_cell_center: tuple[float, float] | None = None  # the point the raster judged unsafe
    violation_cell_safe: bool | None = None  # was the violated cell in the believed safe set
    violation_cell_known_unsafe_since: float | None = None
    barrier: Barrier | None = field(default=None, repr=False, compare=False)  # final snapshot

    COLUMNS = ("t", "x", "y", "theta", "vx_nom", "vy_nom", "w_nom", "vx_safe", "vy_safe", "w_safe", "h", "margin", "intervened")

    def append(self, t: float, s: RobotState, u_nom: ControlInput, u: ControlInput, d: FilterDiagnostics) -> None:
        self.rows.append(
            (t, s.x, s.y, s.theta, u_nom.vx, u_nom.vy, u_nom.omega, u.vx, u.vy, u.omega, d.h, d.margin, int(d.intervened))
        )

    def array(self) -> np.ndarray:
        return np.array(self.rows, dtype=float).reshape(-1, len(self.COLUMNS))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for row in self.rows:
            w.writerow([repr(float(v)) if i < 12 else str(v) for i, v in enumerate(row)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    def emitted_before(self, pred: Predicate, t: float) -> bool:
        return any(d.delivery_time <= t + 1e-9 and pred in d.predicates_unsafe for d in self.deliveries)


@dataclass
class RunMetrics:
    scenario: str
    mode: str
    seed: int
    task_label: str
    success: bool
    failure_attribution: str
    min_h: float
    violation: bool
    goal_reached: bool
    path_length: float
    duration: float
    interventions: int
    assumption_violations: int
    degenerate_steps: int

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# perception per mode


def _perceive(cfg: EpisodeConfig, sc: Scenario, frame: Frame, rng: np.random.Generator):
    """Image-space safe/unsafe masks plus the emitted predicates for one frame."""
    cam = cfg.camera
    shape = frame.labels.shape
    if cfg.mode == "geometric":
        pts, (v, u) = frame_points(frame, cam)
        tall = np.zeros(shape, dtype=bool)
        tall[v, u] = pts[:, 2] > cfg.step_height
        ground = np.zeros(shape, dtype=bool)
        ground[v, u] = pts[:, 2] <= 1e-6
        return ground & ~tall, tall, PerceptionEvent((), (), frame.frame_id, frame.timestamp, frame.timestamp + cfg.latency), ()
    if cfg.mode == "no_context":
        masks = frame.class_masks()
        unsafe = tuple(Predicate("NEAR", c) for c in sorted(masks) if sc.category_of(c) == "metric_obstacle")
        event = PerceptionEvent((), unsafe, frame.frame_id, frame.timestamp, frame.timestamp + cfg.latency)
    else:
        event = oracle_predicates(sc, frame, cfg.detection, rng, cfg.latency)
        masks = frame.class_masks()
    g = ground_predicates(event.predicates_safe, event.predicates_unsafe, masks, shape, cfg.kernel)
    safe, unsafe = compose_image_safe_set(g.safe_masks, g.unsafe_masks, shape)
    return safe, unsafe, event, tuple(g.failures)


def ground_truth_raster(sc: Scenario, grid: SafetyGrid) -> np.ndarray:
    """True where the cell center is ground-truth unsafe."""
    centers = grid.centers().reshape(-1, 2)
    return ~ground_truth_safe_many(sc, centers).reshape(grid.shape)


def make_grid(sc: Scenario, cfg: EpisodeConfig) -> SafetyGrid:
    return SafetyGrid.covering(sc.bounds(), cfg.resolution, margin=2 * cfg.detection.max_range)


def episode_start(sc: Scenario, cfg: EpisodeConfig, rng: np.random.Generator) -> RobotState:
    x, y, th = sc.start_pose
    r = cfg.start_radius * math.sqrt(rng.random())
    phi = 2 * math.pi * rng.random()
    return RobotState(x + r * math.cos(phi), y + r * math.sin(phi), th)


def run_episode(cfg: EpisodeConfig, scenario: Scenario | None = None) -> tuple[TrajectoryLog, RunMetrics]:
    sc = scenario if scenario is not None else get_builtin(cfg.scenario)
    start_seq, detect_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    detect_rng = np.random.default_rng(detect_seq)
    state = episode_start(sc, cfg, np.random.default_rng(start_seq))

    grid = make_grid(sc, cfg)
    gt_unsafe = ground_truth_raster(sc, grid)
    log = TrajectoryLog(sc.name, cfg.mode, cfg.seed, cfg.dt)
    if cfg.mode == "oracle":
        grid.n_unsafe[gt_unsafe] += 1
        for region in sc.ground_truth_unsafe:
            src = sc.entity(region.source_entity)
            log.deliveries.append(DeliveryRecord(-1, 0.0, 0.0, (), (Predicate(region.operator, src.class_label),), (), False))
    barrier = Barrier.build(grid, cfg.tau, cfg.treat_unknown)
    unsafe_since = np.full(grid.shape, np.inf)
    unsafe_since[~barrier.safe] = 0.0

    horizon = cfg.horizon_for(sc)
    n_ticks = int(math.floor(horizon / cfg.dt + 1e-9))
    period_ticks = max(1, int(round(cfg.frame_period / cfg.dt)))
    latency_ticks = int(round(cfg.latency / cfg.dt))
    pending: deque = deque()
    wp_index = 0
    goal_reached = False
    min_h = math.inf
    path_length = 0.0
    interventions = assumption_violations = degenerate = 0
    violation = False
    frame_id = 0
    tick = 0

    for tick in range(n_ticks):
        t = tick * cfg.dt
        if cfg.mode != "oracle" and tick % period_ticks == 0:
            frame = render_frame(sc, state.as_tuple(), cfg.camera, t, frame_id)
            safe_m, unsafe_m, event, failures = _perceive(cfg, sc, frame, detect_rng)
            pending.append((tick + latency_ticks, safe_m, unsafe_m, frame, event, failures))
            frame_id += 1
        while pending and pending[0][0] <= tick:
            _, safe_m, unsafe_m, frame, event, failures = pending.popleft()
            project_and_accumulate(
                safe_m, unsafe_m, frame, frame.camera_pose, grid, cfg.camera, cfg.detection.min_range, cfg.detection.max_range
            )
            barrier = rebuild_safe_set(barrier, (state.x, state.y))
            newly = ~barrier.safe & np.isinf(unsafe_since)
            unsafe_since[newly] = t
            unsafe_since[barrier.safe] = np.inf
            assumption_violations += int(barrier.assumption_violation)
            log.deliveries.append(
                DeliveryRecord(
                    event.frame_id, event.capture_time, t, event.predicates_safe, event.predicates_unsafe,
                    failures, barrier.assumption_violation,
                )
            )

        u_nom, wp_index = nominal_controller(state, sc.waypoints, cfg.gains, wp_index, cfg.bounds)
        if wp_index >= len(sc.waypoints):
            goal_reached = True
        if cfg.filter_enabled:
            u, diag = filter_step(state, u_nom, barrier, cfg.slope, cfg.bounds, cfg.clearance, cfg.active_band)
        else:
            _, diag = filter_step(state, u_nom, barrier, cfg.slope, None, cfg.clearance, cfg.active_band)
            u, diag = u_nom, replace(diag, intervened=False, intervention=0.0)
        log.append(t, state, u_nom, u, diag)
        min_h = min(min_h, diag.h)
        interventions += int(diag.intervened)
        degenerate += int(diag.degenerate)
        if goal_reached:
            break

        nxt = step_dynamics(state, u, cfg.dt)
        path_length += math.hypot(nxt.x - state.x, nxt.y - state.y)
        state = nxt
        i, j = grid.cell_of(grid.clamp((state.x, state.y)))
        if gt_unsafe[i, j]:
            violation = True
            log.violation_time = (tick + 1) * cfg.dt
            log.violation_position = (state.x, state.y)
            log.violation_cell_center = tuple(float(v) for v in grid.center((i, j)))
            log.violation_cell_safe = bool(barrier.safe[i, j])
            since = unsafe_since[i, j]
            log.violation_cell_known_unsafe_since = None if math.isinf(since) else float(since)
            break

    log.barrier = barrier
    success = (goal_reached and not violation) if sc.task_label == "safe" else not violation
    metrics = RunMetrics(
        scenario=sc.name,
        mode=cfg.mode,
        seed=cfg.seed,
        task_label=sc.task_label,
        success=success,
        failure_attribution="none",
        min_h=float(min_h),
        violation=violation,
        goal_reached=goal_reached,
        path_length=path_length,
        duration=len(log.rows) * cfg.dt,
        interventions=interventions,
        assumption_violations=assumption_violations,
        degenerate_steps=degenerate,
    )
    if not success:
        metrics.failure_attribution = classify_failure(log, metrics, sc)
    return log, metrics


def classify_failure(log: TrajectoryLog, metrics: RunMetrics, scenario: Scenario) -> str:
    """Attribute a failed run to missing context, misgrounding, or enforcement.

    ``ctx`` when the predicate generating a violated region was not delivered
    before the violation; ``grnd`` when it was but the violated cell was still
    believed safe; ``enf`` when the cell was already outside the safe set.
    A safe task that times out without a violation was blocked by a spurious
    constraint, which counts as ``grnd``.
    """
    if metrics.success:
        raise ValueError("classify_failure called on a successful run")
    if not metrics.violation:
        return "grnd"
    t = log.violation_time if log.violation_time is not None else math.inf
    pos = log.violation_cell_center or log.violation_position
    regions = scenario.regions_at(pos) if pos is not None else []
    for region in regions:
        pred = Predicate(region.operator, scenario.entity(region.source_entity).class_label)
        if not log.emitted_before(pred, t):
            return "ctx"
    if not regions:
        # left every navigable surface without entering a listed region
        surfaces = [e for e in scenario.entities if e.category == "navigable_surface"]
        if not any(log.emitted_before(Predicate("ON", e.class_label), t) for e in surfaces):
            return "ctx"
    if log.violation_cell_safe:
        return "grnd"
    return "enf"


# ---------------------------------------------------------------------------
# suites


def episode_seed(base_seed: int, scenario_index: int, repeat: int) -> int:
    return int(np.random.SeedSequence([base_seed, scenario_index, repeat]).generate_state(1)[0])


@dataclass
class ModeSummary:
    mode: str
    episodes: int
    total: float
    safe: float
    unsafe: float
    ctx: float
    grnd: float
    enf: float
    failures: int

    def row(self) -> str:
        pct = lambda v: "    n/a" if math.isnan(v) else f"{100 * v:6.1f}%"  # noqa: E731
        return (
            f"{self.mode:<11} {pct(self.total)} {pct(self.safe)} {pct(self.unsafe)}   "
            f"{pct(self.ctx)} {pct(self.grnd)} {pct(self.enf)}  ({self.failures} failures / {self.episodes})"
        )


def summarize(metrics: Sequence[RunMetrics], mode: str) -> ModeSummary:
    ms = [m for m in metrics if m.mode == mode]
    safe = [m for m in ms if m.task_label == "safe"]
    unsafe = [m for m in ms if m.task_label == "unsafe"]
    fails = [m for m in ms if not m.success]
    rate = lambda xs: sum(m.success for m in xs) / len(xs) if xs else float("nan")  # noqa: E731
    share = lambda a: sum(m.failure_attribution == a for m in fails) / len(fails) if fails else 0.0  # noqa: E731
    return ModeSummary(mode, len(ms), rate(ms), rate(safe), rate(unsafe), share("ctx"), share("grnd"), share("enf"), len(fails))


def format_table(summaries: Iterable[ModeSummary]) -> str:
    head = f"{'method':<11} {'total':>7} {'safe':>7} {'unsafe':>7}   {'ctx':>7} {'grnd':>7} {'enf':>7}"
    lines = ["success rate                       failure attribution", head, "-" * len(head)]
    lines += [s.row() for s in summaries]
    return "\n".join(lines) + "\n"


@dataclass
class SuiteResult:
    metrics: list[RunMetrics]
    summaries: dict[str, ModeSummary]

    def table(self) -> str:
        return format_table(self.summaries.values())

    def to_json(self) -> str:
        doc = {
            "summaries": {k: asdict(v) for k, v in self.summaries.items()},
            "episodes": [m.to_dict() for m in self.metrics],
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def _run_one(args):
    cfg, out_dir = args
    log, metrics = run_episode(cfg)
    if out_dir is not None:
        stem = Path(out_dir) / f"{cfg.mode}__{cfg.scenario}__{cfg.seed}"
        log.write_csv(f"{stem}.csv")
        Path(f"{stem}.json").write_text(json.dumps(metrics.to_dict(), sort_keys=True, indent=1))
    return metrics


def run_suite(
    scenarios: Sequence[str] | None = None,
    modes: Sequence[str] = MODES,
    repeats: int = 5,
    base_seed: int = 0,
    template: EpisodeConfig | None = None,
    jobs: int = 1,
    out_dir: str | Path | None = None,
) -> SuiteResult:
    """Every (mode, scenario, repeat) episode; seeds depend on scenario and repeat only, so modes see identical starts."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    names = list(scenarios) if scenarios is not None else [s.name for s in builtin_scenarios()]
    template = template or EpisodeConfig(names[0])
    configs = [
        replace(template, scenario=name, mode=mode, seed=episode_seed(base_seed, idx, rep))
        for mode in modes
        for idx, name in enumerate(names)
        for rep in range(repeats)
    ]
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    work = [(c, out_dir) for c in configs]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            metrics = list(pool.map(_run_one, work, chunksize=4))
    else:
        metrics = [_run_one(w) for w in work]
    summaries = {mode: summarize(metrics, mode) for mode in modes}
    return SuiteResult(metrics, summaries)


# ---------------------------------------------------------------------------
# static-barrier episodes (forward invariance checks)


def run_static_episode(
    barrier: Barrier,
    start: RobotState,
    goal: Sequence[float],
    steps: int = 300,
    dt: float = 0.1,
    slope: float = 0.25,
    clearance: float = 0.2,
    bounds: InputBounds = InputBounds(),
    gains: ControllerGains = ControllerGains(),
    band: float | None = 0.2,
) -> np.ndarray:
    """Drive toward ``goal`` under a fixed barrier; returns ``h`` at every visited state."""
    s = start
    hs = []
    for _ in range(steps):
        u_nom, idx = nominal_controller(s, [goal], gains, 0, bounds)
        u, d = filter_step(s, u_nom, barrier, slope, bounds, clearance, band)
        hs.append(d.h)
        if idx >= 1:
            break
        s = step_dynamics(s, u, dt)
    else:
        hs.append(barrier_value(barrier, (s.x, s.y)))
    return np.array(hs)
