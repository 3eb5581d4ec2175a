"""Discrete-time CBF safety filter for a planar holonomic base.

The barrier condition ``<grad h, g(x) u> >= -alpha(h)`` is a single linear
inequality in ``u``, so the minimally invasive input is a halfspace projection
of the nominal command.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace

import numpy as np

from .grounding import Barrier, barrier_gradient, barrier_value


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.remainder(theta, 2 * math.pi)
    return math.pi if t == -math.pi else t


@dataclass(frozen=True)
class RobotState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.theta)):
            raise ValueError("robot state must be finite")
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.x, self.y, self.theta)


@dataclass(frozen=True)
class ControlInput:
    vx: float
    vy: float
    omega: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.vx, self.vy, self.omega)):
            raise ValueError("control input must be finite")

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        return cls(float(u[0]), float(u[1]), float(u[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.vx, self.vy, self.omega])

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


ZERO_INPUT = ControlInput(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class InputBounds:
    """Planar speed bound (norm of (vx, vy)) and yaw-rate bound."""

    v_max: float = 0.35
    omega_max: float = 1.0

    def __post_init__(self):
        if self.v_max < 0 or self.omega_max < 0:
            raise ValueError("input bounds must be nonnegative")

    def project(self, u: np.ndarray) -> np.ndarray:
        out = np.array(u, dtype=float)
        n = math.hypot(out[0], out[1])
        if n > self.v_max:
            out[:2] *= self.v_max / n
        out[2] = min(max(out[2], -self.omega_max), self.omega_max)
        return out

    def contains(self, u, tol: float = 1e-12) -> bool:
        return math.hypot(u[0], u[1]) <= self.v_max + tol and abs(u[2]) <= self.omega_max + tol

    def support_point(self, a: np.ndarray) -> np.ndarray:
        """The input in the bounds maximizing ``a . u``."""
        out = np.zeros(3)
        n = math.hypot(a[0], a[1])
        if n > 0:
            out[:2] = self.v_max * a[:2] / n
        out[2] = self.omega_max * np.sign(a[2])
        return out


def step_dynamics(s: RobotState, u: ControlInput, dt: float = 0.1) -> RobotState:
    """Body-frame velocities rotated into the world frame, one Euler step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    c, sn = math.cos(s.theta), math.sin(s.theta)
    return RobotState(
        s.x + dt * (c * u.vx - sn * u.vy),
        s.y + dt * (sn * u.vx + c * u.vy),
        s.theta + dt * u.omega,
    )


def constraint_from_gradient(theta: float, grad, h: float, slope: float = 0.25) -> tuple[np.ndarray, float]:
    """``a = g(x)^T [grad, 0]`` and ``b = -slope * h`` (the drift term vanishes)."""
    if not slope > 0:
        raise ValueError("class-K slope must be positive")
    c, s = math.cos(theta), math.sin(theta)
    gx, gy = float(grad[0]), float(grad[1])
    a = np.array([c * gx + s * gy, -s * gx + c * gy, 0.0])
    return a, -slope * h


def cbf_constraint(s: RobotState, barrier: Barrier, slope: float = 0.25, clearance: float = 0.0) -> tuple[np.ndarray, float]:
    """Halfspace ``a . u >= b`` enforcing the barrier condition at ``s``.

    ``clearance`` shifts the barrier to ``h - clearance`` so the robot keeps a
    margin from the boundary-cell centers.
    """
    h = barrier_value(barrier, (s.x, s.y)) - clearance
    return constraint_from_gradient(s.theta, barrier_gradient(barrier, (s.x, s.y)), h, slope)


@dataclass(frozen=True)
class QPSolution:
    u: ControlInput
    active: bool
    degenerate: bool = False
    feasible: bool = True


def _bounded_projection(u_nom: np.ndarray, a: np.ndarray, b: float, bounds: InputBounds) -> tuple[np.ndarray, bool]:
    """Minimize ``|u - u_nom|^2`` over the bounds intersected with ``a . u >= b``.

    The minimizer is ``P(u_nom + lam * a)`` for the smallest multiplier
    ``lam >= 0`` meeting the constraint, where ``P`` projects onto the bounds;
    ``a . P(u_nom + lam * a)`` is nondecreasing in ``lam``, so ``lam`` is found
    by bisection.
    """
    project = bounds.project
    u0 = project(u_nom)
    if a @ u0 >= b:
        return u0, True
    top = bounds.support_point(a)
    if a @ top < b:
        return top, False
    lo, hi = 0.0, 1.0
    while a @ project(u_nom + hi * a) < b:
        hi *= 2.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if a @ project(u_nom + mid * a) >= b:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    return project(u_nom + hi * a), True


def solve_qp_detailed(u_nom: ControlInput, a, b: float, bounds: InputBounds | None = None) -> QPSolution:
    a = np.asarray(a, dtype=float)
    if not (np.all(np.isfinite(a)) and math.isfinite(b)):
        raise ValueError("constraint must be finite")
    un = u_nom.as_array()
    slack = float(a @ un) - b
    aa = float(a @ a)
    if slack >= 0:
        u, active = un, False
    elif math.sqrt(aa) < 1e-9:
        return QPSolution(ZERO_INPUT, True, degenerate=True, feasible=b <= 0)
    else:
        u, active = un + (-slack / aa) * a, True
    if bounds is None or bounds.contains(u):
        return QPSolution(ControlInput.from_array(u), active)
    u, feasible = _bounded_projection(un, a, b, bounds)
    return QPSolution(ControlInput.from_array(u), True, feasible=feasible)


def solve_qp(u_nom: ControlInput, a, b: float, bounds: InputBounds | None = None) -> ControlInput:
    """Closest input to ``u_nom`` satisfying ``a . u >= b`` (and the bounds, when given).

    A vanishing ``a`` with the nominal input infeasible returns zero input; see
    :func:`solve_qp_detailed` for the degeneracy and feasibility flags.
    """
    return solve_qp_detailed(u_nom, a, b, bounds).u


def cbf_constraints(
    s: RobotState, barrier: Barrier, slope: float = 0.25, clearance: float = 0.0, band: float = 0.2
) -> tuple[np.ndarray, np.ndarray]:
    """One halfspace per boundary center within ``band`` of the nearest, stacked as ``A u >= b``.

    Inside the safe set ``h`` is the minimum of the distances to the boundary
    centers, which is not differentiable where two of them tie. Enforcing only
    the nearest piece lets the robot slide along such a ridge and lose ``h``
    at a rate that does not vanish near the boundary; enforcing every nearly
    active piece closes that gap. Outside the safe set ``h`` is a maximum of
    pieces and the nearest one suffices. Inside a boundary cell the piece of
    its own center uses the cell's inward normal instead of the radial
    direction.
    """
    xy = barrier.grid.clamp((s.x, s.y))
    k0, d0 = barrier.nearest_boundary(xy)
    if k0 < 0 or not barrier.is_safe_point(xy) or d0 < 1e-9:
        a, b = cbf_constraint(s, barrier, slope, clearance)
        return a[None, :], np.array([b])
    assert barrier._tree is not None
    cand = np.sort(np.asarray(barrier._tree.query_ball_point(xy, d0 + band), dtype=np.int64))
    dx = xy[0] - barrier.boundary_points[cand, 0]
    dy = xy[1] - barrier.boundary_points[cand, 1]
    d = np.sqrt(dx * dx + dy * dy)
    gx, gy = dx / d, dy / d
    cell = barrier.grid.cell_of(xy)
    if barrier.boundary[cell[0], cell[1]]:
        # the own center sits half a cell inside the set edge; radial directions
        # from it point outward in the outer half of the cell
        own = np.nonzero(np.all(barrier.grid.cell_of(barrier.boundary_points[cand]) == cell, axis=1))[0]
        n = barrier.inward_normal(cell)
        gx[own], gy[own] = n[0], n[1]
    c, sn = math.cos(s.theta), math.sin(s.theta)
    A = np.stack([c * gx + sn * gy, -sn * gx + c * gy, np.zeros(len(d))], axis=1)
    return A, -slope * (d - clearance)


def _solve_polytope(un: np.ndarray, A: np.ndarray, b: np.ndarray) -> np.ndarray | None:
    """Exact projection of ``un`` onto ``{u : A u >= b}`` by active-set enumeration (small ``A`` only)."""
    tol = 1e-12
    if np.all(A @ un - b >= -tol):
        return un.copy()
    m = len(b)
    rank = min(np.linalg.matrix_rank(A), 3) if m else 0
    for size in range(1, rank + 1):
        best = None
        for idx in itertools.combinations(range(m), size):
            As = A[list(idx)]
            G = As @ As.T
            if abs(np.linalg.det(G)) < 1e-14:
                continue
            lam = np.linalg.solve(G, b[list(idx)] - As @ un)
            if np.any(lam < -1e-12):
                continue
            u = un + As.T @ lam
            if np.all(A @ u - b >= -1e-10):
                dist = float(np.sum((u - un) ** 2))
                if best is None or dist < best[0]:
                    best = (dist, u)
        if best is not None:
            return best[1]
    return None


def solve_qp_multi(
    u_nom: ControlInput, A, b, bounds: InputBounds | None = None, iterations: int = 2000
) -> QPSolution:
    """Closest input to ``u_nom`` meeting every row of ``A u >= b`` (and the bounds, when given).

    A single row reduces to :func:`solve_qp_detailed`. With bounds the
    intersection is handled by Dykstra's alternating projections.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    if len(b) == 1:
        return solve_qp_detailed(u_nom, A[0], float(b[0]), bounds)
    un = u_nom.as_array()
    u = _solve_polytope(un, A, b)
    if u is None:
        # conflicting halfspaces: fall back to the most violated one
        k = int(np.argmin(A @ un - b))
        sol = solve_qp_detailed(u_nom, A[k], float(b[k]), bounds)
        return replace(sol, feasible=False)
    active = bool(np.any(u != un))
    if bounds is None or bounds.contains(u):
        return QPSolution(ControlInput.from_array(u), active)
    x = un.copy()
    p = np.zeros(3)
    q = np.zeros(3)
    for _ in range(iterations):
        y = _solve_polytope(x + p, A, b)
        if y is None:
            break
        p = x + p - y
        x_new = bounds.project(y + q)
        q = y + q - x_new
        if np.max(np.abs(x_new - x)) < 1e-12:
            x = x_new
            break
        x = x_new
    feasible = bool(np.all(A @ x - b >= -1e-8))
    return QPSolution(ControlInput.from_array(x), True, feasible=feasible)


@dataclass(frozen=True)
class FilterDiagnostics:
    h: float
    margin: float  # a . u_safe - b
    intervened: bool
    intervention: float  # |u_safe - u_nom|
    degenerate: bool = False
    feasible: bool = True


def filter_step(
    s: RobotState,
    u_nom: ControlInput,
    barrier: Barrier,
    slope: float = 0.25,
    bounds: InputBounds | None = None,
    clearance: float = 0.0,
    band: float | None = None,
) -> tuple[ControlInput, FilterDiagnostics]:
    """Filtered input and diagnostics.

    With ``band=None`` the single nearest-center constraint is used; otherwise
    every boundary center within ``band`` of the nearest contributes one (see
    :func:`cbf_constraints`).
    """
    h = barrier_value(barrier, (s.x, s.y))
    if band is None:
        a, b = constraint_from_gradient(s.theta, barrier_gradient(barrier, (s.x, s.y)), h - clearance, slope)
        A, bs = a[None, :], np.array([b])
    else:
        A, bs = cbf_constraints(s, barrier, slope, clearance, band)
    sol = solve_qp_multi(u_nom, A, bs, bounds)
    delta = float(np.linalg.norm(sol.u.as_array() - u_nom.as_array()))
    diag = FilterDiagnostics(
        h=h,
        margin=float(np.min(A @ sol.u.as_array() - bs)),
        intervened=delta > 0.0,
        intervention=delta,
        degenerate=sol.degenerate,
        feasible=sol.feasible,
    )
    return sol.u, diag
