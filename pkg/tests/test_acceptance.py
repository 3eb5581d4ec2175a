"""End-to-end acceptance checks, one block per criterion.

Run ``pytest tests/test_acceptance.py`` to get the per-criterion summary at the
end of the terminal report.
"""

import time

import numpy as np
import pytest

from ctxsafe.certificate import (
    CertificateProblem,
    InverseDistanceParams,
    certify,
    expected_inverse_distance,
    monte_carlo_validate,
)
from ctxsafe.grounding import Barrier, barrier_gradient, barrier_value, compose_image_safe_set
from ctxsafe.safety_filter import ControlInput, RobotState, solve_qp
from ctxsafe.sensor import DetectionModel
from ctxsafe.sim import MODES, EpisodeConfig, run_episode, run_static_episode, run_suite
from oracles import brute_boundary, brute_h, brute_qp

REFERENCE = CertificateProblem(
    InverseDistanceParams(1.0, 0.1), DetectionModel(p0=0.75, epsilon=1e-3, D=4.0), R=4.0, delta=0.1, gamma=0.0,
    speed=0.35, latency=3.0,
)


# -- 1. certificate reproduction --------------------------------------------


@pytest.fixture(scope="module")
def reference_certificate():
    t0 = time.perf_counter()
    out = certify(REFERENCE)
    return out, time.perf_counter() - t0


@pytest.mark.criterion(1)
def test_c1_budget_and_feasible_search(reference_certificate, record_property):
    out, elapsed = reference_certificate
    s = out["search"]
    record_property("kappa_budget", out["kappa_budget"])
    record_property("feasible_points", f"{len(s.feasible_points)}/{s.evaluated}")
    record_property("best", f"c={s.params.c:.4g} l={s.params.ell:.4g}")
    record_property("seconds", f"{elapsed:.2f}")
    assert out["kappa_budget"] == 3
    assert s.found
    assert elapsed < 10.0


@pytest.mark.criterion(1)
@pytest.mark.xfail(
    strict=True,
    reason="at c=1, l=0.1 the three-measurement beeline sum is 1.0294 > c/l*(delta-gamma) = 1; "
    "the condition holds only for l below about 0.0925",
)
def test_c1_reference_point_among_solutions(reference_certificate, record_property):
    out, _ = reference_certificate
    at = out["at_given"]
    record_property("lhs_at_k3", f"{out['table'][3][1].lhs:.5f}")
    record_property("rhs", f"{REFERENCE.rhs:.5f}")
    assert out["search"].is_feasible_at(1.0, 0.1)
    assert at.feasible and at.kappa <= 3


# -- 2. Monte Carlo soundness -----------------------------------------------


@pytest.mark.criterion(2)
def test_c2_monte_carlo_soundness(record_property):
    t0 = time.perf_counter()
    kappa = certify(REFERENCE, search=False)["kappa_budget"]
    mc = monte_carlo_validate(kappa, REFERENCE.model, 100_000, np.random.default_rng(2024))
    elapsed = time.perf_counter() - t0
    record_property("rate", f"{mc.rate:.5f}")
    record_property("ci95", f"[{mc.ci_low:.5f}, {mc.ci_high:.5f}]")
    record_property("analytic_miss", f"{mc.analytic_miss:.5f}")
    record_property("seconds", f"{elapsed:.2f}")
    assert mc.analytic_miss == pytest.approx(0.0625, abs=5e-4)
    assert mc.ci_high <= 0.1
    assert abs(mc.rate - mc.analytic_miss) <= 3 * mc.sigma
    assert elapsed < 30.0


# -- 3. monotonicity in k ---------------------------------------------------


@pytest.mark.criterion(3)
def test_c3_expected_inverse_distance_nonincreasing(record_property):
    rng = np.random.default_rng(33)
    worst = -np.inf
    for _ in range(20):
        p0 = float(rng.uniform(0.05, 0.999))
        eps = float(rng.uniform(0.0, p0))
        D = float(rng.uniform(1.0, 10.0))
        prior = str(rng.choice(["uniform", "point_mass"]))
        R = float(rng.uniform(0.05, 1.0) * D)
        params = InverseDistanceParams(float(rng.uniform(0.1, 10)), float(rng.uniform(0.01, 1.0)))
        prob = CertificateProblem(params, DetectionModel(p0, eps, D), R, 0.1, 0.0, prior)
        v = np.array([expected_inverse_distance(k, prob) for k in range(51)])
        rel = (v[1:] - v[:-1]) / v[:-1]
        worst = max(worst, float(rel.max()))
    record_property("max_relative_increase", f"{worst:.3g}")
    assert worst <= 1e-9


# -- 4. QP against brute force ----------------------------------------------


def _kkt_residual(u, un, a, b):
    lam = float((u - un) @ a / (a @ a))
    stationarity = float(np.abs(u - un - lam * a).max())
    primal = max(0.0, b - float(a @ u))
    dual = max(0.0, -lam)
    slack = abs(lam * (float(a @ u) - b))
    return max(stationarity, primal, dual, slack)


@pytest.mark.criterion(4)
def test_c4_qp_matches_grid_search(record_property):
    # instances whose minimizer lies in [-1, 1]^3, where the grid search is exhaustive
    rng = np.random.default_rng(44)
    t0 = time.perf_counter()
    worst_gap = worst_kkt = 0.0
    n = 0
    while n < 100:
        un = rng.uniform(-0.8, 0.8, 3)
        a = rng.normal(size=3)
        b = float(a @ un + rng.uniform(-0.3, 0.6))
        u = solve_qp(ControlInput(*un), a, b).as_array()
        if np.any(np.abs(u) > 1):
            continue
        n += 1
        obj = float(np.sum((u - un) ** 2))
        worst_gap = max(worst_gap, abs(obj - brute_qp(un, a, b)))
        worst_kkt = max(worst_kkt, _kkt_residual(u, un, a, b))
    elapsed = time.perf_counter() - t0
    record_property("max_objective_gap", f"{worst_gap:.2e}")
    record_property("max_kkt_residual", f"{worst_kkt:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert worst_gap <= 2e-3
    assert worst_kkt < 1e-9
    assert elapsed < 60.0


# -- 5. signed distance against brute force ---------------------------------


def _fd_checkable(b, x, step, pts):
    # away from equidistant loci, the singular point on a boundary center, and
    # the cell edges where h changes sign
    d = np.sort(np.hypot(pts[:, 0] - x[0], pts[:, 1] - x[1]))
    if d[0] < 1e-3 or (len(d) > 1 and d[1] - d[0] < 1e-3):
        return False
    cells = [b.grid.cell_of(x + o) for o in ((step, 0), (-step, 0), (0, step), (0, -step), (0, 0))]
    return len({bool(b.safe[i, j]) for i, j in cells}) == 1


@pytest.mark.criterion(5)
def test_c5_barrier_matches_brute_force(record_property):
    rng = np.random.default_rng(55)
    step = 1e-6
    mismatches = checked = 0
    worst = 0.0
    for _ in range(200):
        safe = rng.random((16, 16)) > rng.uniform(0.1, 0.5)
        if not safe.any():
            safe[rng.integers(16), rng.integers(16)] = True
        b = Barrier.from_safe_mask(safe, 0.2, origin=tuple(rng.uniform(-5, 5, 2)))
        assert np.array_equal(b.boundary, brute_boundary(safe))
        pts = b.grid.center(np.argwhere(b.boundary))
        lo = np.asarray(b.grid.origin) - 0.1 + 2 * step
        hi = lo + 16 * 0.2 - 4 * step
        for x in rng.uniform(lo, hi, size=(25, 2)):
            mismatches += barrier_value(b, x) != brute_h(b, x)
            if not _fd_checkable(b, x, step, pts):
                continue
            fd = np.array([
                (barrier_value(b, x + (step, 0)) - barrier_value(b, x - (step, 0))) / (2 * step),
                (barrier_value(b, x + (0, step)) - barrier_value(b, x - (0, step))) / (2 * step),
            ])
            worst = max(worst, float(np.abs(barrier_gradient(b, x) - fd).max()))
            checked += 1
    record_property("value_mismatches", mismatches)
    record_property("gradient_points", checked)
    record_property("max_gradient_error", f"{worst:.2e}")
    assert mismatches == 0
    assert checked > 4000
    assert worst <= 0.15


# -- 6. image-space composition ---------------------------------------------


def _per_pixel(safe_masks, unsafe_masks, shape):
    safe = np.zeros(shape, bool)
    unsafe = np.zeros(shape, bool)
    for i in range(shape[0]):
        for j in range(shape[1]):
            u = any(m[i, j] for m in unsafe_masks)
            unsafe[i, j] = u
            safe[i, j] = any(m[i, j] for m in safe_masks) and not u
    return safe, unsafe


@pytest.mark.criterion(6)
def test_c6_composition_matches_per_pixel(record_property):
    rng = np.random.default_rng(66)
    mismatches = 0
    for _ in range(10_000):
        density = rng.uniform(0.02, 0.5)
        ns, nu = rng.integers(0, 4, 2)
        safe_masks = [rng.random((8, 8)) < density for _ in range(ns)]
        unsafe_masks = [rng.random((8, 8)) < density for _ in range(nu)]
        got = compose_image_safe_set(safe_masks, unsafe_masks, (8, 8))
        want = _per_pixel(safe_masks, unsafe_masks, (8, 8))
        mismatches += int(not (np.array_equal(got[0], want[0]) and np.array_equal(got[1], want[1])))
    record_property("mismatches", mismatches)
    assert mismatches == 0


# -- 7. forward invariance --------------------------------------------------


def random_static_world(rng, n=40, res=0.2):
    """Random rectangular obstacles on an ``n x n`` grid, a start with ``h >= 0.1`` and a goal anywhere."""
    safe = np.ones((n, n), bool)
    for _ in range(rng.integers(1, 6)):
        i, j = rng.integers(0, n, 2)
        w, h = rng.integers(1, 12, 2)
        safe[i : i + w, j : j + h] = False
    b = Barrier.from_safe_mask(safe, res)
    ext = (n - 1) * res
    while True:
        p = rng.uniform(0, ext, 2)
        if barrier_value(b, p) >= 0.1:
            break
    start = RobotState(float(p[0]), float(p[1]), float(rng.uniform(-np.pi, np.pi)))
    return b, start, tuple(rng.uniform(0, ext, 2))


@pytest.mark.criterion(7)
def test_c7_forward_invariance(record_property):
    rng = np.random.default_rng(77)
    lowest = np.inf
    for _ in range(1000):
        b, start, goal = random_static_world(rng)
        if not b.safe.any():
            continue
        lowest = min(lowest, float(run_static_episode(b, start, goal).min()))
    record_property("min_h", f"{lowest:.4f}")
    assert lowest >= -(0.35 * 0.1 + 0.1)


# -- 8. suite ----------------------------------------------------------------


@pytest.fixture(scope="module")
def suite():
    t0 = time.perf_counter()
    res = run_suite(None, MODES, repeats=5, base_seed=0)
    return res, time.perf_counter() - t0


def _rates(s):
    return f"safe {s.safe:.1%} unsafe {s.unsafe:.1%} ctx {s.ctx:.2f} grnd {s.grnd:.2f} enf {s.enf:.2f}"


@pytest.mark.slow
@pytest.mark.criterion(8)
def test_c8_suite_reproduction(suite, record_property):
    res, elapsed = suite
    s = res.summaries
    for m in MODES:
        record_property(m, _rates(s[m]))
    record_property("seconds", f"{elapsed:.0f}")
    assert all(s[m].episodes == 60 for m in MODES)
    assert s["geometric"].safe == 1.0 and s["geometric"].unsafe == 0.0
    assert s["oracle"].safe == 1.0 and s["oracle"].unsafe == 1.0
    assert s["core"].unsafe >= 0.85
    assert s["no_context"].unsafe <= 0.40
    assert s["no_context"].unsafe < s["core"].unsafe
    assert elapsed < 600.0


# -- 9. determinism ----------------------------------------------------------


@pytest.mark.criterion(9)
def test_c9_identical_seeds_identical_csv(tmp_path, record_property):
    runs = [("wet_floor_sign", "core", 11), ("cones_line", "core", 5), ("sidewalk", "no_context", 3)]
    for name, mode, seed in runs:
        paths = []
        for k in range(2):
            log, _ = run_episode(EpisodeConfig(name, mode, seed=seed))
            path = tmp_path / f"{name}_{k}.csv"
            log.write_csv(path)
            paths.append(path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
    record_property("episodes_compared", len(runs))
