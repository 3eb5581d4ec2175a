import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ctxsafe.certificate import (
    CertificateProblem,
    InverseDistanceParams,
    InvalidModelError,
    beeline_positions,
    certify,
    check_mts,
    check_theorem_condition,
    clopper_pearson,
    decade_grid,
    expected_inverse_distance,
    format_report,
    miss_probability,
    monte_carlo_validate,
    mts_lhs,
    nondimensionalize,
    regularized_inverse_distance,
    search_certificate,
    solve_mts,
    solve_nopm,
    with_params,
)
from ctxsafe.sensor import DetectionModel

B43 = DetectionModel(p0=0.75, epsilon=1e-3, D=4.0)


def _prob(**kw):
    base = dict(params=InverseDistanceParams(1.0, 0.1), model=B43, R=4.0, delta=0.1, gamma=0.0)
    base.update(kw)
    return CertificateProblem(**base)


def _quad_oracle(k, prob):
    # adaptive quadrature of the same ratio, independent of the Simpson path
    m = prob.model
    c, ell = prob.params.c, prob.params.ell
    w = lambda r: (1 - m(r)) ** k  # noqa: E731
    num = integrate.quad(lambda r: w(r) * c / (r + ell), prob.R, prob.D, epsabs=0, epsrel=1e-12, limit=200)[0]
    den = integrate.quad(w, prob.R, prob.D, epsabs=0, epsrel=1e-12, limit=200)[0]
    return num / den


def _mts_oracle(k, prob):
    # the displayed beeline sum, written out term by term
    c, ell, D, m = prob.params.c, prob.params.ell, prob.D, prob.model
    pos = [D * (k - j) / k for j in range(k)]
    total = 0.0
    for i in range(1, k):
        miss_before = 1.0
        for j in range(i):
            miss_before *= 1 - m(pos[j])
        total += c / (ell + pos[i]) * miss_before * m(pos[i])
    remainder = 1.0
    for j in range(k):
        remainder *= 1 - m(pos[j])
    return total + remainder * c / ell, remainder


# -- inverse distance -------------------------------------------------------


def test_regularized_inverse_distance_examples():
    p = InverseDistanceParams(1.0, 0.1)
    assert regularized_inverse_distance(0.0, p) == pytest.approx(10.0)
    assert regularized_inverse_distance(4.0, p) == pytest.approx(1 / 4.1)
    assert regularized_inverse_distance(1e12, p) < 1e-11
    with pytest.raises(ValueError):
        regularized_inverse_distance(-0.1, p)
    with pytest.raises(ValueError):
        InverseDistanceParams(0.0, 0.1)


# -- expectation bound ------------------------------------------------------


def test_point_mass_k0_is_pre_measurement_bound():
    p = _prob(prior="point_mass")
    assert expected_inverse_distance(0, p) == 1.0 / 4.1
    assert expected_inverse_distance(7, p) == 1.0 / 4.1


def test_blind_detector_is_k_invariant():
    p = _prob(model=DetectionModel(0.0, 0.0, 4.0), R=1.0)
    vals = [expected_inverse_distance(k, p) for k in (0, 1, 5, 20)]
    assert max(vals) - min(vals) <= 1e-12 * vals[0]


def test_sequence_nonincreasing_example():
    p = _prob(model=DetectionModel(0.75, 0.05, 4.0), R=1.0)
    vals = [expected_inverse_distance(k, p) for k in range(11)]
    assert all(b <= a * (1 + 1e-9) for a, b in zip(vals, vals[1:]))
    assert vals[-1] < vals[0]


@pytest.mark.parametrize("k", [0, 1, 3, 10, 40])
def test_simpson_matches_adaptive_quadrature(k):
    p = _prob(model=DetectionModel(0.6, 0.4, 5.0), R=0.5)
    assert expected_inverse_distance(k, p) == pytest.approx(_quad_oracle(k, p), rel=1e-8)


def test_simpson_requires_enough_nodes():
    with pytest.raises(ValueError):
        expected_inverse_distance(1, _prob(R=1.0), nodes=101)
    with pytest.raises(ValueError):
        expected_inverse_distance(-1, _prob())


def test_perfect_detector_posterior_is_invalid():
    p = _prob(model=DetectionModel(1.0, 0.0, 4.0), R=2.0, delta=0.25, gamma=0.25)
    assert expected_inverse_distance(0, p) > 0
    with pytest.raises(InvalidModelError):
        expected_inverse_distance(1, p)


def test_problem_invariants():
    with pytest.raises(ValueError):
        _prob(delta=0.1, gamma=0.2)
    with pytest.raises(ValueError):
        _prob(delta=0.2, gamma=0.2)  # equality needs a perfect detector
    with pytest.raises(ValueError):
        _prob(R=5.0)
    with pytest.raises(ValueError):
        _prob(speed=0.0)
    with pytest.raises(ValueError):
        _prob(prior="gaussian")


# -- theorem condition and NOPM ---------------------------------------------


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 1.0), st.floats(0.5, 3.9), st.integers(0, 8))
def test_condition_holds_whenever_rhs_exceeds_supremum(ell, R, k):
    # c / (R + l) bounds the integrand on the prior support
    delta = min(0.99, ell / (R + ell) + 0.01)
    p = _prob(params=InverseDistanceParams(2.0, ell), R=R, delta=delta)
    assert check_theorem_condition(k, p).feasible


def test_reference_parameters_feasible_within_budget():
    p = _prob()
    assert any(check_theorem_condition(k, p).feasible for k in range(4))
    nopm = solve_nopm(p)
    assert nopm.feasible and nopm.kappa <= 3


def test_k0_point_mass_infeasible_when_rhs_small():
    p = _prob(params=InverseDistanceParams(1.0, 1.0), prior="point_mass")
    res = check_theorem_condition(0, p)
    assert p.rhs < 1.0 / 5.0
    assert not res.feasible and res.residual < 0


def test_nopm_trivial_and_infeasible():
    assert solve_nopm(_prob(params=InverseDistanceParams(1.0, 1.0), delta=0.9)).kappa == 0
    blind = _prob(model=DetectionModel(0.0, 0.0, 4.0), R=1.0, params=InverseDistanceParams(1.0, 1.0))
    res = solve_nopm(blind, k_max=5)
    assert not res.feasible and res.kappa == 5
    with pytest.raises(ValueError):
        solve_nopm(blind, k_max=0)


def test_result_invariants():
    for k in range(6):
        res = check_mts(k, _prob(params=InverseDistanceParams(1.0, 0.05)))
        assert res.feasible == (res.residual >= 0)
        if res.feasible and k:
            assert res.max_safe_speed == pytest.approx(4.0 / (k * 3.0))


# -- beeline (MTS) ----------------------------------------------------------


def test_beeline_positions():
    assert beeline_positions(3, 4.0) == pytest.approx([4.0, 8 / 3, 4 / 3])
    assert len(beeline_positions(0, 4.0)) == 0


def test_k1_is_contact_and_infeasible():
    p = _prob()
    lhs, miss = mts_lhs(1, p)
    assert miss == 1.0
    assert lhs == pytest.approx(10.0)
    assert not check_mts(1, p).feasible


def test_k3_remainder_product():
    miss = miss_probability(3, DetectionModel(0.75, 1e-12, 4.0))
    assert miss == pytest.approx(0.0625, rel=1e-9)
    assert 0.0625 * 10 <= 0.1 * 10


@pytest.mark.parametrize("k", [1, 2, 3, 5, 12])
@pytest.mark.parametrize("ell", [0.01, 0.1, 1.0])
def test_mts_lhs_matches_term_by_term_oracle(k, ell):
    p = _prob(params=InverseDistanceParams(1.3, ell))
    lhs, miss = mts_lhs(k, p)
    ref_lhs, ref_miss = _mts_oracle(k, p)
    assert lhs == pytest.approx(ref_lhs, rel=1e-12)
    assert miss == pytest.approx(ref_miss, rel=1e-12)


def test_reference_point_lhs_value():
    # verbatim beeline form at c = 1, l = 0.1, k = 3
    res = check_mts(3, _prob())
    assert res.lhs == pytest.approx(_mts_oracle(3, _prob())[0], rel=1e-12)
    assert res.lhs == pytest.approx(1.02945, abs=1e-5)
    assert res.rhs == pytest.approx(1.0)


def test_solve_mts_scans_from_one():
    res = solve_mts(_prob())
    assert res.feasible
    assert all(not check_mts(k, _prob()).feasible for k in range(1, res.kappa))


def test_miss_probability_survives_underflow():
    m = DetectionModel(0.999, 1e-3, 4.0)
    assert miss_probability(200, m) > 0 or math.isclose(miss_probability(200, m), 0.0)
    assert np.isfinite(mts_lhs(200, _prob(model=m))[0])


# -- nondimensionalization --------------------------------------------------


def test_nondimensionalize_examples():
    assert nondimensionalize(0.35, 3.0, 4.0) == 3
    assert nondimensionalize(0.35, 4.1, 4.0) == 2
    assert nondimensionalize(1e-9, 3.0, 4.0) == 200
    assert nondimensionalize(1e-9, 3.0, 4.0, k_max=50) == 50
    with pytest.raises(ValueError):
        nondimensionalize(0.0, 3.0, 4.0)


# -- search -----------------------------------------------------------------


def test_decade_grid_hits_powers_of_ten():
    g = decade_grid(-3, 1)
    assert 0.1 in g and 1.0 in g and 0.001 in g and 10.0 in g
    assert len(g) == 41


def test_search_finds_certificate_for_reference_setup():
    s = search_certificate(0.1, 0.0, 3, B43, R=4.0)
    assert s.found
    assert s.best.kappa <= 3
    assert s.evaluated == 41 * 41
    # every reported point really is feasible
    for res in s.feasible_points[:: max(1, len(s.feasible_points) // 20)]:
        assert check_mts(res.kappa, with_params(_prob(), res.params.c, res.params.ell)).feasible


def test_search_is_effectively_one_dimensional():
    s = search_certificate(0.1, 0.0, 3, B43, R=4.0)
    ells = decade_grid(-3, 1)
    for ell in ells[::5]:
        col = [s.is_feasible_at(c, ell) for c in decade_grid(-2, 2)]
        assert all(col) or not any(col)


def test_trivial_certificate_for_perfect_detector():
    perfect = DetectionModel(1.0, 0.0, 4.0)
    s = search_certificate(0.25, 0.25, 3, perfect, R=4.0, c_grid=[0.01, 1, 100], ell_grid=[0.001, 0.1, 10])
    assert s.found and len(s.feasible_points) == 9


def test_delta_below_remainder_is_infeasible_everywhere():
    miss = miss_probability(3, B43)
    s = search_certificate(0.9 * miss, 0.0, 3, B43, R=4.0)
    assert not s.found
    assert s.best.residual < 0


@pytest.mark.parametrize("c", [0.1, 1.0, 10.0])
def test_scale_invariance_in_c(c):
    for ell, k in itertools.product([0.05, 0.1, 0.5], range(5)):
        base = _prob(params=InverseDistanceParams(1.0, ell))
        scaled = _prob(params=InverseDistanceParams(c, ell))
        assert check_mts(k, base).feasible == check_mts(k, scaled).feasible
        assert check_theorem_condition(k, base).feasible == check_theorem_condition(k, scaled).feasible


def test_weaker_detector_never_needs_fewer_measurements():
    prev = 0
    for p0 in (0.95, 0.9, 0.8, 0.7, 0.6, 0.5):
        res = solve_mts(_prob(model=DetectionModel(p0, 1e-3, 4.0), params=InverseDistanceParams(1.0, 0.05)))
        assert res.feasible
        assert res.kappa >= prev
        prev = res.kappa


# -- Monte Carlo ------------------------------------------------------------


def test_monte_carlo_matches_analytic_product():
    mc = monte_carlo_validate(3, B43, 100_000, np.random.default_rng(0))
    assert abs(mc.rate - mc.analytic_miss) <= 3 * mc.sigma
    assert mc.ci_low <= mc.analytic_miss <= mc.ci_high or abs(mc.rate - mc.analytic_miss) <= 3 * mc.sigma
    assert mc.ci_high <= 0.1


def test_monte_carlo_perfect_and_single_measurement():
    perfect = DetectionModel(1.0, 0.0, 4.0)
    assert monte_carlo_validate(2, perfect, 1000, np.random.default_rng(1)).rate == 0.0
    assert monte_carlo_validate(1, B43, 1000, np.random.default_rng(1)).rate == 1.0


def test_stopping_margin_discards_late_detections():
    mc = monte_carlo_validate(3, B43, 20_000, np.random.default_rng(2), stopping_margin=3.0)
    assert mc.rate == 1.0  # only r = 4 (never detected) lies beyond the margin
    with pytest.raises(ValueError):
        monte_carlo_validate(3, B43, 0, np.random.default_rng(2))


def test_monte_carlo_chunking_is_consistent():
    a = monte_carlo_validate(4, B43, 30_000, np.random.default_rng(3), chunk=30_000)
    b = monte_carlo_validate(4, B43, 30_000, np.random.default_rng(3), chunk=30_000)
    assert a == b


def test_soundness_for_certified_configurations():
    for p0 in (0.6, 0.75, 0.9):
        model = DetectionModel(p0, 1e-3, 4.0)
        res = solve_mts(_prob(model=model, params=InverseDistanceParams(1.0, 0.01)))
        assert res.feasible
        mc = monte_carlo_validate(res.kappa, model, 100_000, np.random.default_rng(int(p0 * 100)))
        assert mc.ci_high <= 0.1


def test_clopper_pearson_edges():
    assert clopper_pearson(0, 10)[0] == 0.0
    assert clopper_pearson(10, 10)[1] == 1.0
    lo, hi = clopper_pearson(50, 100)
    assert lo < 0.5 < hi


# -- report -----------------------------------------------------------------


def test_certify_report_contents():
    out = certify(_prob(), validate=2000, seed=1)
    assert out["kappa_budget"] == 3
    text = format_report(out)
    for key in ("kappa budget", "per-k table", "certificate search", "Monte Carlo", "max safe speed"):
        assert key in text
