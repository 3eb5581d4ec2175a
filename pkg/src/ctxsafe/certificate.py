"""Probabilistic safety certificate for perception with a bounded sensing radius.

The regularized inverse distance ``c / (r + l)`` to an undetected unsafe
region is treated as a supermartingale: the certificate holds with risk
``delta`` when its expected value after ``k`` measurements stays below
``c (delta - gamma) / l``. Two operational forms are provided: the number of
observations per movement (NOPM) and the beeline maximum traversal speed
(MTS), plus a Monte Carlo check of the beeline model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import integrate, stats

from .sensor import DetectionModel

PRIORS = ("uniform", "point_mass")
K_MAX = 200


class InvalidModelError(ValueError):
    """Every prior location is detected with certainty, so the posterior is undefined."""


@dataclass(frozen=True)
class InverseDistanceParams:
    c: float = 1.0
    ell: float = 0.1

    def __post_init__(self):
        if not (self.c > 0 and self.ell > 0):
            raise ValueError("c and ell must be positive")


@dataclass(frozen=True)
class CertificateProblem:
    """Inputs of the certificate.

    ``prior`` is the distribution of the initial distance to the unsafe region:
    ``uniform`` on ``[R, D]`` or ``point_mass`` at ``R``. With ``R == D`` the
    uniform prior degenerates to the point mass.
    """

    params: InverseDistanceParams = InverseDistanceParams()
    model: DetectionModel = DetectionModel(p0=0.75, epsilon=1e-3, D=4.0)
    R: float = 4.0
    delta: float = 0.1
    gamma: float = 0.0
    prior: str = "uniform"
    speed: float = 0.35
    latency: float = 3.0

    def __post_init__(self):
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}")
        if not 0.0 <= self.gamma < 1.0 or not self.delta < 1.0:
            raise ValueError("need 0 <= gamma and delta < 1")
        if self.delta < self.gamma or (self.delta == self.gamma and not self.model.is_perfect):
            raise ValueError("need gamma < delta (equality only for a perfect detector)")
        if not 0 < self.R <= self.model.D:
            raise ValueError("need 0 < R <= D")
        if not (self.speed > 0 and self.latency > 0):
            raise ValueError("speed and latency must be positive")

    @property
    def D(self) -> float:
        return self.model.D

    @property
    def rhs(self) -> float:
        return self.params.c * (self.delta - self.gamma) / self.params.ell


@dataclass(frozen=True)
class CertificateResult:
    kappa: int
    feasible: bool
    lhs: float
    rhs: float
    residual: float
    max_safe_speed: float
    miss_probability: float | None = None
    params: InverseDistanceParams | None = None

    @property
    def normalized_residual(self) -> float:
        """Residual in probability units (divided by ``c / l``)."""
        if self.params is None:
            return self.residual
        return self.residual * self.params.ell / self.params.c


def regularized_inverse_distance(r, params: InverseDistanceParams):
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise ValueError("distance must be nonnegative")
    out = params.c / (r + params.ell)
    return out if out.ndim else float(out)


def _simpson_ratio(k: int, prob: CertificateProblem, nodes: int) -> float:
    r = np.linspace(prob.R, prob.D, nodes)
    # m jumps to 0 at r = D; that single point has no mass, so use the left limit
    m = np.asarray(prob.model(np.minimum(r, np.nextafter(prob.D, 0.0))))
    with np.errstate(divide="ignore"):
        logw = k * np.log1p(-m) if k else np.zeros_like(r)
    top = logw.max()
    if not np.isfinite(top):
        raise InvalidModelError("every prior location is detected with certainty")
    w = np.exp(logw - top)
    z = integrate.simpson(w, x=r)
    if top + math.log(max(z / (prob.D - prob.R), 1e-320)) < math.log(1e-300):
        raise InvalidModelError("normalization constant underflows")
    num = integrate.simpson(w * prob.params.c / (r + prob.params.ell), x=r)
    return float(num / z)


def expected_inverse_distance(k: int, prob: CertificateProblem, nodes: int = 10001, rtol: float = 1e-6) -> float:
    """Upper bound on the expected inverse distance after ``k`` missed measurements.

    The prior over the initial distance is reweighted by the probability
    ``(1 - m(r))^k`` of missing all ``k`` measurements and normalized.
    Composite Simpson on ``nodes`` uniform nodes; the node count doubles until
    halving the step changes the value by less than ``rtol`` relative.
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    c, ell = prob.params.c, prob.params.ell
    if prob.prior == "point_mass" or prob.R == prob.D:
        m = float(prob.model(prob.R))
        if k and m >= 1.0:
            raise InvalidModelError("the point-mass prior is detected with certainty")
        return c / (prob.R + ell)
    if nodes < 10001:
        raise ValueError("at least 10^4 quadrature nodes are required")
    nodes |= 1  # Simpson wants an odd node count
    value = _simpson_ratio(k, prob, nodes)
    for _ in range(4):
        finer = _simpson_ratio(k, prob, 2 * nodes - 1)
        if abs(finer - value) <= rtol * abs(finer):
            return finer
        nodes, value = 2 * nodes - 1, finer
    return value


def _result(kappa, lhs, prob, miss=None) -> CertificateResult:
    rhs = prob.rhs
    feasible = lhs <= rhs
    speed = (math.inf if kappa == 0 else prob.D / (kappa * prob.latency)) if feasible else 0.0
    return CertificateResult(kappa, feasible, lhs, rhs, rhs - lhs, speed, miss, prob.params)


def check_theorem_condition(k: int, prob: CertificateProblem) -> CertificateResult:
    return _result(k, expected_inverse_distance(k, prob), prob)


def solve_nopm(prob: CertificateProblem, k_max: int = K_MAX) -> CertificateResult:
    """Smallest number of observations per movement meeting the expectation bound (linear scan)."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    res = None
    for k in range(k_max + 1):
        res = check_theorem_condition(k, prob)
        if res.feasible:
            return res
    return res  # type: ignore[return-value]


def beeline_positions(k: int, D: float) -> np.ndarray:
    """Measurement ranges ``D (k - j) / k`` for ``j = 0..k-1``; the first is taken at ``D``."""
    return D * (k - np.arange(k)) / k if k else np.empty(0)


def miss_probability(k: int, model: DetectionModel) -> float:
    """Probability of missing every beeline measurement (log-domain product)."""
    m = np.asarray(model(beeline_positions(k, model.D)), dtype=float)
    if np.any(m >= 1.0):
        return 0.0
    return float(np.exp(np.sum(np.log1p(-m))))


def mts_lhs(k: int, prob: CertificateProblem) -> tuple[float, float]:
    """Left-hand side of the beeline condition and the all-miss remainder.

    Term ``i`` is the inverse distance at the ``i``-th measurement times the
    probability that it is the first detection; the remainder weighs contact
    (``c / l``) by the all-miss probability. For a perfect detector the
    first detection stops the beeline with certainty, so only the remainder
    carries risk.
    """
    c, ell = prob.params.c, prob.params.ell
    r = beeline_positions(k, prob.D)
    m = np.asarray(prob.model(r), dtype=float)
    miss = miss_probability(k, prob.model)
    if prob.model.is_perfect:
        return miss * c / ell, miss
    with np.errstate(divide="ignore"):
        log_miss = np.concatenate([[0.0], np.cumsum(np.log1p(-m))])  # log prod_{j < i}(1 - m_j)
    total = 0.0
    for i in range(1, k):
        total += c / (ell + r[i]) * math.exp(log_miss[i]) * m[i]
    return total + miss * c / ell, miss


def check_mts(k: int, prob: CertificateProblem) -> CertificateResult:
    lhs, miss = mts_lhs(k, prob)
    return _result(k, lhs, prob, miss)


def solve_mts(prob: CertificateProblem, k_max: int = K_MAX) -> CertificateResult:
    """Smallest beeline measurement count meeting the condition (linear scan; monotonicity is not assumed)."""
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    res = None
    for k in range(1, k_max + 1):
        res = check_mts(k, prob)
        if res.feasible:
            return res
    return res  # type: ignore[return-value]


def nondimensionalize(speed: float, latency: float, D: float, k_max: int = K_MAX) -> int:
    """Measurements available per D-length traversal: ``floor(D / (speed * latency))``, capped at ``k_max``."""
    if not (speed > 0 and latency > 0 and D > 0):
        raise ValueError("speed, latency and D must be positive")
    ratio = D / (speed * latency)
    return int(min(math.floor(ratio * (1 + 1e-12)), k_max))


def decade_grid(lo_exp: int, hi_exp: int, per_decade: int = 10) -> np.ndarray:
    """Log grid ``10**(i / per_decade)`` hitting every power of ten exactly."""
    return 10.0 ** (np.arange(lo_exp * per_decade, hi_exp * per_decade + 1) / per_decade)


@dataclass
class CertificateSearch:
    best: CertificateResult
    params: InverseDistanceParams
    feasible_points: list[CertificateResult] = field(default_factory=list)
    evaluated: int = 0

    @property
    def found(self) -> bool:
        return self.best.feasible

    def is_feasible_at(self, c: float, ell: float) -> bool:
        return any(
            math.isclose(p.params.c, c, rel_tol=1e-12) and math.isclose(p.params.ell, ell, rel_tol=1e-12)
            for p in self.feasible_points
        )


def search_certificate(
    target_delta: float,
    gamma: float,
    kappa_budget: int,
    model: DetectionModel,
    prior: str = "uniform",
    R: float | None = None,
    c_grid=None,
    ell_grid=None,
    speed: float = 0.35,
    latency: float = 3.0,
) -> CertificateSearch:
    """Grid search over ``(c, l)`` for a beeline certificate within ``kappa_budget`` measurements.

    The condition is invariant to ``c``, but the 2-D grid is kept. Among
    feasible points the one with the largest residual in probability units
    wins; with none feasible the best (least negative) residual is reported.
    """
    if kappa_budget < 1:
        raise ValueError("kappa_budget must be >= 1")
    c_grid = decade_grid(-2, 2) if c_grid is None else np.asarray(c_grid, dtype=float)
    ell_grid = decade_grid(-3, 1) if ell_grid is None else np.asarray(ell_grid, dtype=float)
    R = model.D if R is None else R
    best = None
    feasible = []
    n = 0
    for c in c_grid:
        for ell in ell_grid:
            params = InverseDistanceParams(float(c), float(ell))
            prob = CertificateProblem(params, model, R, target_delta, gamma, prior, speed, latency)
            res = solve_mts(prob, k_max=kappa_budget)
            n += 1
            if res.feasible:
                feasible.append(res)
            if best is None or (res.feasible, res.normalized_residual) > (best.feasible, best.normalized_residual):
                best = res
    assert best is not None and best.params is not None
    return CertificateSearch(best, best.params, feasible, n)


@dataclass(frozen=True)
class MonteCarloResult:
    kappa: int
    trials: int
    unsafe: int
    rate: float
    ci_low: float
    ci_high: float
    analytic_miss: float

    @property
    def sigma(self) -> float:
        p = self.analytic_miss
        return math.sqrt(max(p * (1 - p), 0.0) / self.trials)


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    alpha = 1 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(alpha / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - alpha / 2, k + 1, n - k))
    return lo, hi


def monte_carlo_validate(
    kappa: int,
    model: DetectionModel,
    trials: int,
    rng: np.random.Generator,
    stopping_margin: float = 0.0,
    chunk: int = 100_000,
) -> MonteCarloResult:
    """Simulate beeline approaches; a trial is safe iff some detection happens beyond ``stopping_margin``."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    r = beeline_positions(kappa, model.D)
    m = np.asarray(model(r), dtype=float)
    useful = r > stopping_margin
    unsafe = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        hits = rng.random((n, kappa)) < m
        unsafe += int(np.sum(~np.any(hits[:, useful], axis=1)))
        done += n
    lo, hi = clopper_pearson(unsafe, trials)
    return MonteCarloResult(kappa, trials, unsafe, unsafe / trials, lo, hi, miss_probability(kappa, model))


# ---------------------------------------------------------------------------
# report


def certify(
    prob: CertificateProblem,
    search: bool = True,
    validate: int = 0,
    seed: int = 0,
    k_max: int = K_MAX,
) -> dict:
    """End-to-end certificate computation used by the command line."""
    budget = nondimensionalize(prob.speed, prob.latency, prob.D, k_max)
    out: dict = {"problem": prob, "kappa_budget": budget}
    out["table"] = [(k, check_mts(k, prob), check_theorem_condition(k, prob)) for k in range(0, max(budget, 1) + 1)]
    out["mts"] = solve_mts(prob, k_max=k_max)
    out["nopm"] = solve_nopm(prob, k_max=k_max)
    if search and budget >= 1:
        out["search"] = search_certificate(
            prob.delta, prob.gamma, budget, prob.model, prob.prior, prob.R, speed=prob.speed, latency=prob.latency
        )
        out["at_given"] = solve_mts(prob, k_max=budget)
    if validate:
        kappa = max(budget, 1)
        out["monte_carlo"] = monte_carlo_validate(kappa, prob.model, validate, np.random.default_rng(seed))
    return out


def format_report(out: dict) -> str:
    prob: CertificateProblem = out["problem"]
    m = prob.model
    lines = [
        "certificate report",
        "== inputs ==",
        f"detection      m(r) = max(0, {m.p0:g} - {m.epsilon:g} r / D) for r < D, D = {m.D:g} m",
        f"initial radius R = {prob.R:g} m, prior {prob.prior}",
        f"risk           delta = {prob.delta:g}, gamma = {prob.gamma:g}",
        f"motion         speed = {prob.speed:g} m/s, latency = {prob.latency:g} s",
        f"kappa budget   {out['kappa_budget']} measurements per D-traversal",
        f"given (c, l)   c = {prob.params.c:g} m, l = {prob.params.ell:g} m",
        "== per-k table (beeline MTS and expectation bound) ==",
        f"{'k':>4} {'mts_lhs':>12} {'miss':>10} {'nopm_lhs':>12} {'rhs':>12} {'mts_ok':>7} {'nopm_ok':>8}",
    ]
    for k, mts, nopm in out["table"]:
        miss = mts.miss_probability if mts.miss_probability is not None else float("nan")
        lines.append(
            f"{k:>4} {mts.lhs:>12.6f} {miss:>10.6f} {nopm.lhs:>12.6f} {mts.rhs:>12.6f} {str(mts.feasible):>7} {str(nopm.feasible):>8}"
        )
    mts, nopm = out["mts"], out["nopm"]
    lines += [
        "== solutions at the given (c, l) ==",
        f"kappa* MTS     {mts.kappa} (feasible {mts.feasible}, residual {mts.residual:.6g})",
        f"kappa* NOPM    {nopm.kappa} (feasible {nopm.feasible}, residual {nopm.residual:.6g})",
        f"max safe speed {mts.max_safe_speed:.6g} m/s" if mts.feasible else "max safe speed n/a (infeasible)",
    ]
    if "at_given" in out:
        g = out["at_given"]
        lines.append(
            f"within budget  feasible {g.feasible} at k = {g.kappa}, residual {g.residual:.6g} "
            f"({g.normalized_residual:.6g} in probability units)"
        )
    if "search" in out:
        s: CertificateSearch = out["search"]
        b = s.best
        lines.append("== certificate search over (c, l) ==")
        if s.found:
            lines += [
                f"status         FEASIBLE certificate at delta = {prob.delta:g}",
                f"chosen         c = {s.params.c:g} m, l = {s.params.ell:g} m, kappa* = {b.kappa}",
                f"residual       {b.residual:.6g} ({b.normalized_residual:.6g} in probability units)",
                f"max safe speed {b.max_safe_speed:.6g} m/s",
                f"feasible grid points {len(s.feasible_points)} of {s.evaluated}",
                f"feasible at (c=1, l=0.1): {s.is_feasible_at(1.0, 0.1)}",
            ]
            if m.is_perfect:
                lines.append(f"note           trivial certificate: perfect detection, delta = gamma = {prob.gamma:g} suffices")
        else:
            lines += [
                "status         INFEASIBLE: no (c, l) on the grid meets the condition",
                f"best residual  {b.normalized_residual:.6g} (probability units) at c = {s.params.c:g}, l = {s.params.ell:g}",
                f"miss probability at budget {b.miss_probability:.6g} lower-bounds delta - gamma",
            ]
    if "monte_carlo" in out:
        mc: MonteCarloResult = out["monte_carlo"]
        lines += [
            "== Monte Carlo beeline validation ==",
            f"trials         {mc.trials} at kappa = {mc.kappa}",
            f"unsafe rate    {mc.rate:.6f} (95% CI [{mc.ci_low:.6f}, {mc.ci_high:.6f}])",
            f"analytic miss  {mc.analytic_miss:.6f}",
            f"within delta   {mc.ci_high <= prob.delta}",
        ]
    return "\n".join(lines) + "\n"


def with_params(prob: CertificateProblem, c: float, ell: float) -> CertificateProblem:
    return replace(prob, params=InverseDistanceParams(c, ell))
