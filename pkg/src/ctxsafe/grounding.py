"""From predicates to a barrier function.

Predicates are evaluated on the per-class label masks of a frame, composed
into an image-space safe set, projected through the depth image into a world
grid of safe/unsafe hit counts, and thresholded into the binary safe set whose
signed distance field is the barrier ``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import ConvexHull, QhullError, cKDTree

from .predicate import Predicate
from .sensor import CameraModel, Frame, frame_points

__all__ = [
    "Predicate",
    "apply_operator",
    "ground_predicates",
    "compose_image_safe_set",
    "SafetyGrid",
    "project_and_accumulate",
    "cell_safety_probability",
    "Barrier",
    "rebuild_safe_set",
    "barrier_value",
    "barrier_gradient",
]

DILATION_KERNEL = 50


# ---------------------------------------------------------------------------
# image space


def dilate(mask: np.ndarray, kernel: int = DILATION_KERNEL) -> np.ndarray:
    """Binary dilation with a ``kernel`` x ``kernel`` square."""
    if kernel < 1:
        raise ValueError("kernel side must be >= 1")
    if not mask.any():
        return mask.copy()
    return ndimage.maximum_filter(mask.astype(np.uint8), size=kernel, mode="constant", cval=0).astype(bool)


def filled_hull(mask: np.ndarray) -> np.ndarray:
    """Every pixel whose center lies in the convex hull of the set pixel centers.

    Collinear inputs degenerate to a segment; pixels within half a pixel of it
    (and inside its extent) are filled.
    """
    out = np.zeros(mask.shape, dtype=bool)
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        return out
    pts = np.c_[rows, cols].astype(float)
    r0, r1, c0, c1 = rows.min(), rows.max(), cols.min(), cols.max()
    rr, cc = np.mgrid[r0 : r1 + 1, c0 : c1 + 1]
    grid = np.c_[rr.ravel(), cc.ravel()].astype(float)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        hull = None
    if hull is not None:
        A, b = hull.equations[:, :2], hull.equations[:, 2]
        inside = np.all(grid @ A.T + b <= 1e-9, axis=1)
    else:
        first, last = pts[np.argmin(pts @ [1, 1e-3])], pts[np.argmax(pts @ [1, 1e-3])]
        d = last - first
        if not d.any():
            inside = np.all(grid == first, axis=1)
        else:
            rel = grid - first
            along = rel @ d / (d @ d)
            off = np.abs(rel[:, 0] * d[1] - rel[:, 1] * d[0]) / math.hypot(*d)
            inside = (along >= -1e-9) & (along <= 1 + 1e-9) & (off <= 0.5)
    out[r0 : r1 + 1, c0 : c1 + 1] = inside.reshape(rr.shape)
    return out | mask


def apply_operator(
    pred: Predicate,
    class_masks: Mapping[str, np.ndarray],
    shape: tuple[int, int] | None = None,
    kernel: int = DILATION_KERNEL,
) -> np.ndarray:
    """Pixel region selected by ``pred``.

    ON and NEAR return the class mask, AROUND its square dilation, BETWEEN the
    filled convex hull of its pixels. A class absent from ``class_masks``
    yields an empty mask (see :func:`ground_predicates` for the failure flag).
    """
    mask = class_masks.get(pred.class_label)
    if mask is None:
        if shape is None:
            if not class_masks:
                raise ValueError("shape required when no class masks are given")
            shape = next(iter(class_masks.values())).shape
        return np.zeros(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if pred.operator in ("ON", "NEAR"):
        return mask.copy()
    if pred.operator == "AROUND":
        return dilate(mask, kernel)
    return filled_hull(mask)


@dataclass
class GroundedPredicates:
    safe_masks: list[np.ndarray]
    unsafe_masks: list[np.ndarray]
    failures: list[Predicate] = field(default_factory=list)


def ground_predicates(
    safe_preds: Iterable[Predicate],
    unsafe_preds: Iterable[Predicate],
    class_masks: Mapping[str, np.ndarray],
    shape: tuple[int, int],
    kernel: int = DILATION_KERNEL,
) -> GroundedPredicates:
    """Apply every predicate; predicates whose class is not segmented are recorded as grounding failures."""
    out = GroundedPredicates([], [])
    for preds, bucket in ((safe_preds, out.safe_masks), (unsafe_preds, out.unsafe_masks)):
        for p in preds:
            if p.class_label not in class_masks:
                out.failures.append(p)
            bucket.append(apply_operator(p, class_masks, shape, kernel))
    return out


def compose_image_safe_set(
    safe_masks: Sequence[np.ndarray], unsafe_masks: Sequence[np.ndarray], shape: tuple[int, int] | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """``(union(safe) minus union(unsafe), union(unsafe))``."""
    masks = list(safe_masks) + list(unsafe_masks)
    if shape is None:
        if not masks:
            raise ValueError("shape required when no masks are given")
        shape = masks[0].shape
    for m in masks:
        if m.shape != tuple(shape):
            raise ValueError(f"mask shape {m.shape} does not match {tuple(shape)}")
    safe = np.zeros(shape, dtype=bool)
    unsafe = np.zeros(shape, dtype=bool)
    for m in safe_masks:
        safe |= m
    for m in unsafe_masks:
        unsafe |= m
    return safe & ~unsafe, unsafe


# ---------------------------------------------------------------------------
# world grid


@dataclass
class SafetyGrid:
    """Per-cell counts of safe and unsafe point observations.

    Cell ``(i, j)`` is centered at ``origin + (i, j) * resolution``; ``i`` runs
    along world x.
    """

    resolution: float
    origin: tuple[float, float]
    shape: tuple[int, int]
    n_safe: np.ndarray = None  # type: ignore[assignment]
    n_unsafe: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if not self.resolution > 0:
            raise ValueError("resolution must be positive")
        self.shape = (int(self.shape[0]), int(self.shape[1]))
        if self.shape[0] < 1 or self.shape[1] < 1:
            raise ValueError("grid needs at least one cell")
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if self.n_safe is None:
            self.n_safe = np.zeros(self.shape, dtype=np.int64)
        if self.n_unsafe is None:
            self.n_unsafe = np.zeros(self.shape, dtype=np.int64)
        if self.n_safe.shape != self.shape or self.n_unsafe.shape != self.shape:
            raise ValueError("count arrays must match the grid shape")

    @classmethod
    def covering(cls, bounds: Sequence[float], resolution: float = 0.2, margin: float = 0.0) -> "SafetyGrid":
        """Grid whose cell centers span ``bounds`` (minx, miny, maxx, maxy) grown by ``margin``."""
        minx, miny, maxx, maxy = bounds
        origin = (minx - margin, miny - margin)
        nx = int(math.ceil((maxx - minx + 2 * margin) / resolution)) + 1
        ny = int(math.ceil((maxy - miny + 2 * margin) / resolution)) + 1
        return cls(resolution, origin, (nx, ny))

    def copy(self) -> "SafetyGrid":
        return SafetyGrid(self.resolution, self.origin, self.shape, self.n_safe.copy(), self.n_unsafe.copy())

    def cell_of(self, xy) -> np.ndarray:
        """Integer cell index (possibly out of extent) of world point(s)."""
        xy = np.asarray(xy, dtype=float)
        return np.rint((xy - np.asarray(self.origin)) / self.resolution).astype(np.int64)

    def center(self, cell) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(cell, dtype=float) * self.resolution

    def in_extent(self, cells) -> np.ndarray:
        cells = np.asarray(cells)
        return (cells[..., 0] >= 0) & (cells[..., 0] < self.shape[0]) & (cells[..., 1] >= 0) & (cells[..., 1] < self.shape[1])

    def clamp(self, xy) -> np.ndarray:
        """Project onto the grid's extent (outer cell edges); points inside are unchanged."""
        lo = np.asarray(self.origin) - 0.5 * self.resolution
        hi = lo + np.asarray(self.shape) * self.resolution
        # stay strictly inside so the rounded cell index is always in range
        eps = 1e-9 * self.resolution
        lo, hi = lo + eps, hi - eps
        return np.clip(np.asarray(xy, dtype=float)[..., :2], lo, hi)

    def centers(self) -> np.ndarray:
        """(nx, ny, 2) array of cell centers."""
        i, j = np.meshgrid(np.arange(self.shape[0]), np.arange(self.shape[1]), indexing="ij")
        return self.center(np.stack([i, j], axis=-1))

    def add_points(self, xy: np.ndarray, safe: bool) -> int:
        """Increment the count of the cell under each point; returns how many landed in the grid."""
        xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        cells = self.cell_of(xy)
        cells = cells[self.in_extent(cells)]
        target = self.n_safe if safe else self.n_unsafe
        np.add.at(target, (cells[:, 0], cells[:, 1]), 1)
        return len(cells)

    def write(self, path: str | Path, tau: float = 0.5) -> None:
        """Text header then one ``n_safe n_unsafe`` line per cell, row-major over (i, j)."""
        lines = [
            f"resolution {self.resolution!r}",
            f"origin {self.origin[0]!r} {self.origin[1]!r}",
            f"extent {self.shape[0]} {self.shape[1]}",
            f"tau {tau!r}",
            "counts",
        ]
        pairs = np.stack([self.n_safe.ravel(), self.n_unsafe.ravel()], axis=1)
        body = "\n".join(f"{a} {b}" for a, b in pairs)
        Path(path).write_text("\n".join(lines) + "\n" + body + "\n")

    @classmethod
    def read(cls, path: str | Path) -> tuple["SafetyGrid", float]:
        lines = Path(path).read_text().splitlines()
        head = {}
        k = 0
        while lines[k] != "counts":
            key, _, value = lines[k].partition(" ")
            head[key] = value.split()
            k += 1
        shape = (int(head["extent"][0]), int(head["extent"][1]))
        counts = np.array([[int(t) for t in ln.split()] for ln in lines[k + 1 :] if ln.strip()], dtype=np.int64)
        grid = cls(
            float(head["resolution"][0]),
            (float(head["origin"][0]), float(head["origin"][1])),
            shape,
            counts[:, 0].reshape(shape).copy(),
            counts[:, 1].reshape(shape).copy(),
        )
        return grid, float(head["tau"][0])


def project_and_accumulate(
    safe_mask: np.ndarray,
    unsafe_mask: np.ndarray,
    frame: Frame,
    robot_pose: Sequence[float],
    grid: SafetyGrid,
    cam: CameraModel = CameraModel(),
    min_range: float = 3.0,
    max_range: float = 7.0,
) -> SafetyGrid:
    """Unproject masked pixels through the depth image, range-gate, and add their counts to ``grid`` in place.

    Range is planar distance from ``robot_pose`` (the pose the frame was captured from).
    """
    if safe_mask.shape != frame.labels.shape or unsafe_mask.shape != frame.labels.shape:
        raise ValueError("masks must match the frame dimensions")
    pose = tuple(robot_pose)
    if pose != tuple(frame.camera_pose):
        frame = Frame(frame.labels, frame.depth, frame.timestamp, pose, frame.classes, frame.instances, frame.frame_id)  # type: ignore[arg-type]
    for mask, is_safe in ((safe_mask, True), (unsafe_mask, False)):
        if not mask.any():
            continue
        pts, _ = frame_points(frame, cam, mask)
        r = np.hypot(pts[:, 0] - pose[0], pts[:, 1] - pose[1])
        keep = (r >= min_range) & (r <= max_range)
        grid.add_points(pts[keep, :2], is_safe)
    return grid


def cell_safety_probability(grid: SafetyGrid, cell, treat_unknown: str = "safe") -> float:
    """``n_safe / (n_safe + n_unsafe)``; unobserved cells take 1 (``safe``) or 0 (``unsafe``)."""
    i, j = cell
    ns, nu = int(grid.n_safe[i, j]), int(grid.n_unsafe[i, j])
    if ns + nu == 0:
        return _unknown_value(treat_unknown)
    return ns / (ns + nu)


def _unknown_value(treat_unknown: str) -> float:
    if treat_unknown == "safe":
        return 1.0
    if treat_unknown == "unsafe":
        return 0.0
    raise ValueError(f"treat_unknown must be 'safe' or 'unsafe', got {treat_unknown!r}")


def safety_probability_field(grid: SafetyGrid, treat_unknown: str = "safe") -> np.ndarray:
    total = grid.n_safe + grid.n_unsafe
    with np.errstate(invalid="ignore", divide="ignore"):
        p = grid.n_safe / total
    return np.where(total == 0, _unknown_value(treat_unknown), p)


# ---------------------------------------------------------------------------
# barrier


def boundary_cells(safe: np.ndarray) -> np.ndarray:
    """Safe cells with an unsafe 4-neighbour or lying on the grid edge."""
    padded = np.pad(safe, 1, constant_values=False)
    all_nb = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return safe & ~all_nb


@dataclass(frozen=True, eq=False)
class Barrier:
    """Immutable snapshot of the safe set and its signed distance field.

    ``grid`` is the grid the snapshot was built from; the binary set and its
    boundary are frozen at construction, so later evidence does not alter it.
    """

    grid: SafetyGrid
    tau: float = 0.5
    treat_unknown: str = "safe"
    safe: np.ndarray = None  # type: ignore[assignment]
    boundary: np.ndarray = None  # type: ignore[assignment]
    boundary_points: np.ndarray = None  # type: ignore[assignment]
    assumption_violation: bool = False
    _tree: cKDTree | None = None

    @classmethod
    def build(cls, grid: SafetyGrid, tau: float = 0.5, treat_unknown: str = "safe") -> "Barrier":
        return rebuild_safe_set(cls(grid, tau, treat_unknown, np.ones(grid.shape, bool)))

    @classmethod
    def from_safe_mask(cls, safe: np.ndarray, resolution: float = 0.2, origin=(0.0, 0.0)) -> "Barrier":
        """Barrier over an explicit binary safe set (used for tests and oracle rasters)."""
        safe = np.asarray(safe, dtype=bool)
        grid = SafetyGrid(resolution, origin, safe.shape)
        grid.n_safe[safe] = 1
        grid.n_unsafe[~safe] = 1
        return cls._assemble(grid, 0.5, "safe", safe, False)

    @classmethod
    def _assemble(cls, grid, tau, treat_unknown, safe, violation):
        bnd = boundary_cells(safe)
        cells = np.argwhere(bnd)
        pts = grid.center(cells) if len(cells) else np.empty((0, 2))
        tree = cKDTree(pts) if len(pts) else None
        return cls(grid, tau, treat_unknown, safe, bnd, pts, violation, tree)

    def is_safe_point(self, xy) -> bool:
        i, j = self.grid.cell_of(self.grid.clamp(xy))
        return bool(self.safe[i, j])

    def nearest_boundary(self, xy) -> tuple[int, float]:
        """Index into ``boundary_points`` of the closest boundary center, and that distance.

        The distance is ``sqrt(dx*dx + dy*dy)`` evaluated exactly as a brute-force
        scan would; the tree only narrows the candidates.
        """
        if self._tree is None:
            return -1, math.inf
        x, y = float(xy[0]), float(xy[1])
        d0, _ = self._tree.query((x, y))
        cand = self._tree.query_ball_point((x, y), d0 * (1 + 1e-9) + 1e-12)
        cand = np.sort(np.asarray(cand, dtype=np.int64))
        dx = x - self.boundary_points[cand, 0]
        dy = y - self.boundary_points[cand, 1]
        dist = np.sqrt(dx * dx + dy * dy)
        k = int(np.argmin(dist))
        return int(cand[k]), float(dist[k])

    def inward_normal(self, cell) -> np.ndarray:
        """Unit vector pointing away from the unsafe (or off-grid) 4-neighbours of ``cell``."""
        i, j = int(cell[0]), int(cell[1])
        n = np.zeros(2)
        for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            a, b = i + di, j + dj
            inside = 0 <= a < self.safe.shape[0] and 0 <= b < self.safe.shape[1]
            if not inside or not self.safe[a, b]:
                n -= (di, dj)
        norm = math.hypot(*n)
        return n / norm if norm > 0 else n


def rebuild_safe_set(barrier: Barrier, robot_position=None) -> Barrier:
    """Threshold current counts into a fresh snapshot.

    When ``robot_position`` is given and its cell flips from safe to unsafe,
    the snapshot is flagged with ``assumption_violation`` (and still applied).
    """
    grid = barrier.grid
    if not 0.0 <= barrier.tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    safe = safety_probability_field(grid, barrier.treat_unknown) >= barrier.tau
    violation = False
    if robot_position is not None and barrier.safe is not None:
        i, j = grid.cell_of(grid.clamp(robot_position))
        violation = bool(barrier.safe[i, j] and not safe[i, j])
    return Barrier._assemble(grid, barrier.tau, barrier.treat_unknown, safe, violation)


def barrier_value(barrier: Barrier, x) -> float:
    """Signed distance (m) from ``x`` to the nearest boundary-cell center: positive in the safe set."""
    xy = barrier.grid.clamp(x)
    _, d = barrier.nearest_boundary(xy)
    return d if barrier.is_safe_point(xy) else -d


def barrier_gradient(barrier: Barrier, x) -> np.ndarray:
    """Unit direction of increasing ``h`` at ``x``.

    On a boundary-cell center the direction is undefined; the gradient is then
    taken an infinitesimal step inward, which is the cell's inward normal.
    """
    xy = barrier.grid.clamp(x)
    k, d = barrier.nearest_boundary(xy)
    if k < 0:
        return np.zeros(2)
    y_star = barrier.boundary_points[k]
    if d < 1e-9:
        return barrier.inward_normal(barrier.grid.cell_of(y_star))
    g = (xy - y_star) / d
    return g if barrier.is_safe_point(xy) else -g


def barrier_field(barrier: Barrier) -> np.ndarray:
    """``h`` at every cell center, as an (nx, ny) array."""
    centers = barrier.grid.centers().reshape(-1, 2)
    if barrier._tree is None:
        d = np.full(len(centers), np.inf)
    else:
        d, _ = barrier._tree.query(centers)
    d = d.reshape(barrier.grid.shape)
    return np.where(barrier.safe, d, -d)


def write_sdf_csv(barrier: Barrier, path: str | Path) -> None:
    """CSV rows ``cell_x, cell_y, h`` (cell-center world coordinates)."""
    centers = barrier.grid.centers().reshape(-1, 2)
    h = barrier_field(barrier).ravel()
    data = np.c_[centers, h]
    np.savetxt(path, data, delimiter=",", header="cell_x,cell_y,h", comments="", fmt="%.6f")
