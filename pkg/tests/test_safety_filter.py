import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxsafe.grounding import Barrier, barrier_value
from ctxsafe.safety_filter import (
    ControlInput,
    InputBounds,
    RobotState,
    cbf_constraint,
    cbf_constraints,
    constraint_from_gradient,
    filter_step,
    solve_qp,
    solve_qp_detailed,
    solve_qp_multi,
    step_dynamics,
    wrap_angle,
)
from oracles import brute_qp

finite = st.floats(-2, 2, allow_nan=False)


def _wall_barrier():
    # safe for i < 30, unsafe beyond; boundary centers on x = 5.8
    safe = np.zeros((60, 40), bool)
    safe[:30, :] = True
    return Barrier.from_safe_mask(safe, 0.2)


# -- state and dynamics -----------------------------------------------------


def test_theta_wrapped_to_half_open_interval():
    assert RobotState(0, 0, math.pi).theta == pytest.approx(math.pi)
    assert RobotState(0, 0, -math.pi).theta == pytest.approx(math.pi)
    assert RobotState(0, 0, 3 * math.pi / 2).theta == pytest.approx(-math.pi / 2)
    assert wrap_angle(2 * math.pi + 0.1) == pytest.approx(0.1)


def test_state_and_input_must_be_finite():
    with pytest.raises(ValueError):
        RobotState(math.nan, 0, 0)
    with pytest.raises(ValueError):
        ControlInput(0, math.inf, 0)


@pytest.mark.parametrize(
    "theta, u, disp",
    [
        (0.0, (1, 0, 0), (0.1, 0.0)),
        (math.pi / 2, (1, 0, 0), (0.0, 0.1)),
        (math.pi / 4, (1, 1, 0), (0.0, 0.1 * math.sqrt(2))),
    ],
)
def test_step_dynamics_examples(theta, u, disp):
    s = RobotState(1.0, 2.0, theta)
    n = step_dynamics(s, ControlInput(*u), 0.1)
    assert (n.x - s.x, n.y - s.y) == pytest.approx(disp, abs=1e-12)
    assert n.theta == pytest.approx(theta)


def test_step_dynamics_turns_and_wraps():
    n = step_dynamics(RobotState(0, 0, math.pi - 0.01), ControlInput(0, 0, 1.0), 0.1)
    assert n.theta == pytest.approx(-math.pi + 0.09)
    with pytest.raises(ValueError):
        step_dynamics(RobotState(0, 0, 0), ControlInput(0, 0, 0), 0.0)


# -- constraint assembly ----------------------------------------------------


def test_constraint_examples():
    a, b = constraint_from_gradient(0.0, (1.0, 0.0), 1.0, 0.25)
    assert b == -0.25
    assert a == pytest.approx((1, 0, 0))
    a, _ = constraint_from_gradient(math.pi / 2, (0.0, 1.0), 0.0)
    assert a == pytest.approx((1, 0, 0), abs=1e-15)
    with pytest.raises(ValueError):
        constraint_from_gradient(0.0, (1.0, 0.0), 1.0, 0.0)


def test_cbf_constraint_uses_barrier():
    b = _wall_barrier()
    s = RobotState(4.8, 4.0, 0.0)
    a, rhs = cbf_constraint(s, b, 0.25)
    assert a == pytest.approx((-1, 0, 0))
    assert rhs == pytest.approx(-0.25 * 1.0)
    _, rhs2 = cbf_constraint(s, b, 0.25, clearance=0.2)
    assert rhs2 == pytest.approx(-0.25 * 0.8)


def test_zero_input_feasible_when_h_nonnegative():
    rng = np.random.default_rng(0)
    b = _wall_barrier()
    for x, y, th in rng.uniform((0, 0, -3), (5.8, 7.8, 3), size=(200, 3)):
        a, rhs = cbf_constraint(RobotState(x, y, th), b)
        assert a @ np.zeros(3) >= rhs


def test_multi_piece_constraints_include_nearest_and_own_cell_normal():
    b = _wall_barrier()
    s = RobotState(5.75, 4.0, 0.0)  # inside the boundary cell at x = 5.8
    A, rhs = cbf_constraints(s, b, band=0.2)
    assert len(rhs) >= 3
    # the own-center piece points inward (-x), not radially outward
    assert np.any(np.all(np.isclose(A, (-1, 0, 0)), axis=1))


# -- single-constraint QP ---------------------------------------------------


def test_inactive_constraint_returns_nominal():
    u = ControlInput(0.2, -0.1, 0.3)
    assert solve_qp(u, (1, 0, 0), -1.0) == u


def test_axis_projection():
    assert solve_qp(ControlInput(0, 0, 0), (1, 0, 0), 0.5).as_array() == pytest.approx((0.5, 0, 0))


def test_degenerate_constraint():
    sol = solve_qp_detailed(ControlInput(0.1, 0, 0), (0, 0, 0), 0.2)
    assert sol.degenerate and sol.u.as_array().tolist() == [0, 0, 0]
    assert not sol.feasible
    ok = solve_qp_detailed(ControlInput(0.1, 0, 0), (0, 0, 0), -0.2)
    assert not ok.degenerate and not ok.active


def test_nonfinite_constraint_rejected():
    with pytest.raises(ValueError):
        solve_qp(ControlInput(0, 0, 0), (math.nan, 0, 0), 0.0)




def test_single_qp_matches_brute_force_grid():
    rng = np.random.default_rng(21)
    for _ in range(10):
        un = rng.uniform(-0.8, 0.8, 3)
        a = rng.normal(size=3)
        b = float(a @ un + rng.uniform(-0.3, 0.6))
        u = solve_qp(ControlInput(*un), a, b).as_array()
        if np.any(np.abs(u) > 1):
            continue
        obj = float(np.sum((u - un) ** 2))
        assert abs(obj - brute_qp(un, a, b)) <= 2e-3


@settings(max_examples=200, deadline=None)
@given(st.tuples(finite, finite, finite), st.tuples(finite, finite, finite), finite)
def test_kkt_and_minimality(un, a, b):
    un, a = np.array(un), np.array(a)
    if np.linalg.norm(a) < 1e-6:
        return
    u = solve_qp(ControlInput(*un), a, b).as_array()
    assert a @ u >= b - 1e-9
    if a @ un < b:
        d = u - un
        # parallel to a and pointing into the halfspace
        assert np.linalg.norm(np.cross(d, a)) <= 1e-9 * max(1.0, np.linalg.norm(d) * np.linalg.norm(a))
        assert d @ a >= 0
        assert a @ u == pytest.approx(b, abs=1e-9)
    else:
        assert np.array_equal(u, un)


def _brute_bounded(un, a, b, bounds, n=81):
    # dense sample of the bounded feasible set on the constraint plane and inside
    best = np.inf
    vs = np.linspace(-bounds.v_max, bounds.v_max, n)
    ws = np.linspace(-bounds.omega_max, bounds.omega_max, n)
    for vx, vy in itertools.product(vs, vs):
        if math.hypot(vx, vy) > bounds.v_max:
            continue
        u = np.c_[np.full(n, vx), np.full(n, vy), ws]
        ok = u @ a >= b
        if ok.any():
            best = min(best, float(np.min(np.sum((u[ok] - un) ** 2, axis=1))))
    return best


def test_bounded_qp_beats_dense_sampling_and_stays_feasible():
    rng = np.random.default_rng(5)
    bounds = InputBounds(0.35, 1.0)
    for _ in range(25):
        un = rng.uniform(-1, 1, 3)
        a = rng.normal(size=3)
        b = float(rng.uniform(-0.2, 0.3))
        sol = solve_qp_detailed(ControlInput(*un), a, b, bounds)
        u = sol.u.as_array()
        assert bounds.contains(u, 1e-9)
        brute = _brute_bounded(un, a, b, bounds)
        if not sol.feasible:
            assert brute == np.inf
            continue
        assert a @ u >= b - 1e-9
        assert float(np.sum((u - un) ** 2)) <= brute + 1e-9


def test_bounded_qp_infeasible_returns_best_effort():
    bounds = InputBounds(0.35, 1.0)
    sol = solve_qp_detailed(ControlInput(0, 0, 0), (1, 0, 0), 0.5, bounds)
    assert not sol.feasible
    assert sol.u.as_array() == pytest.approx((0.35, 0, 0))


def test_bounds_projection():
    bounds = InputBounds(0.35, 1.0)
    assert bounds.project(np.array([3.0, 4.0, -5.0])) == pytest.approx((0.21, 0.28, -1.0))
    with pytest.raises(ValueError):
        InputBounds(-1.0)


# -- multi-constraint QP ----------------------------------------------------


def test_multi_qp_matches_general_solver():
    from scipy.optimize import minimize

    rng = np.random.default_rng(9)
    for _ in range(40):
        m = int(rng.integers(2, 5))
        un = rng.uniform(-1, 1, 3)
        A = rng.normal(size=(m, 3))
        A[:, 2] = 0.0
        b = rng.uniform(-0.5, 0.2, m)
        sol = solve_qp_multi(ControlInput(*un), A, b)
        if not sol.feasible:
            continue
        u = sol.u.as_array()
        assert np.all(A @ u >= b - 1e-9)
        ref = minimize(
            lambda x: np.sum((x - un) ** 2),
            un,
            jac=lambda x: 2 * (x - un),
            constraints=[{"type": "ineq", "fun": lambda x: A @ x - b, "jac": lambda x: A}],
            method="SLSQP",
            options={"ftol": 1e-14, "maxiter": 500},
        )
        assert np.sum((u - un) ** 2) <= np.sum((ref.x - un) ** 2) + 1e-7


def test_multi_qp_with_bounds_is_feasible():
    rng = np.random.default_rng(10)
    bounds = InputBounds()
    for _ in range(40):
        un = rng.uniform(-1, 1, 3)
        A = rng.normal(size=(3, 3))
        A[:, 2] = 0.0
        b = rng.uniform(-0.3, 0.0, 3)  # zero input always feasible
        sol = solve_qp_multi(ControlInput(*un), A, b, bounds)
        u = sol.u.as_array()
        assert sol.feasible
        assert np.all(A @ u >= b - 1e-8)
        assert bounds.contains(u, 1e-8)


# -- filter step ------------------------------------------------------------


def test_no_intervention_far_from_boundary():
    b = _wall_barrier()
    s = RobotState(3.0, 4.0, 0.0)
    u_nom = ControlInput(0.3, 0.0, 0.1)
    u, d = filter_step(s, u_nom, b)
    assert u == u_nom and not d.intervened and d.intervention == 0.0
    assert d.h == pytest.approx(2.8)  # the grid rim also counts as boundary


def test_heading_at_boundary_is_slowed_to_limit():
    b = _wall_barrier()
    s = RobotState(5.6, 4.0, 0.0)
    h = barrier_value(b, (s.x, s.y))
    u, d = filter_step(s, ControlInput(1.0, 0.0, 0.0), b, slope=0.25)
    assert d.intervened
    assert u.vx == pytest.approx(0.25 * h)
    nxt = step_dynamics(s, u, 0.1)
    hdot = (barrier_value(b, (nxt.x, nxt.y)) - h) / 0.1
    assert hdot >= -0.25 * h - 1e-9


def test_negative_h_forces_recovery():
    b = _wall_barrier()
    s = RobotState(6.4, 4.0, 0.0)
    u, d = filter_step(s, ControlInput(0.0, 0.0, 0.0), b)
    assert d.h < 0
    assert u.vx < 0  # moves back toward the safe side


def test_heading_component_untouched_without_bounds():
    b = _wall_barrier()
    u, _ = filter_step(RobotState(5.6, 4.0, 0.3), ControlInput(1.0, 0.2, 0.7), b)
    assert u.omega == 0.7


def test_filter_band_none_uses_single_constraint():
    b = _wall_barrier()
    s = RobotState(5.0, 4.0, 0.0)
    u1, d1 = filter_step(s, ControlInput(1.0, 0, 0), b, band=None)
    a, rhs = cbf_constraint(s, b)
    assert u1 == solve_qp(ControlInput(1.0, 0, 0), a, rhs)
    assert d1.margin == pytest.approx(0.0, abs=1e-12)
