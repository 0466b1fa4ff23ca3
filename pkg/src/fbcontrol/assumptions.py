"""Standing-assumption checks: Λ_β smallness, the bounding ODEs for the
adjoint size, the contraction inequality, monotonicity, regime detection."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy import integrate

from .problem import CoefficientSet, SampleBox, Scenario, estimate_lipschitz, validate_derivatives

BETAS = tuple(range(2, 9))


def F_eval(y, L1: float, L2: float, beta0: float):
    """F(y) = L1 + (L2 + L1 + L1L2/β₀)|y| + (L2 + (L1L2 + L2²)/β₀)y² + (L2²/β₀)|y|³."""
    if beta0 <= 0:
        raise ValueError("beta0 must be positive")
    a = np.abs(np.asarray(y, dtype=float))
    c1 = L2 + L1 + L1 * L2 / beta0
    c2 = L2 + (L1 * L2 + L2 * L2) / beta0
    c3 = L2 * L2 / beta0
    out = L1 + c1 * a + c2 * a * a + c3 * a * a * a
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class BoundOdeSolution:
    """s and l on an ascending time grid over [0, T], with blow-up info and thresholds."""

    t: np.ndarray
    s: np.ndarray
    l: np.ndarray
    blowup: bool
    blowup_time: float | None
    t1: float
    t2: float
    t_star: float
    L1: float
    L2: float
    beta0: float
    T: float

    @property
    def s0(self) -> float:
        return float(self.s[0])

    @property
    def l0(self) -> float:
        return float(self.l[0])

    @property
    def bound(self) -> float:
        """s(0) ∨ (−l(0)), the a-priori bound on the first-order adjoint."""
        return max(self.s0, -self.l0)


def _rk4_terminal(rhs: Callable[[float], float], y_T: float, T: float, steps: int, cap: float):
    """Integrate y(t) with y' = −rhs(y) backward from T to 0 (τ = T − t forward)."""
    h = T / steps
    vals = np.empty(steps + 1)
    vals[0] = y_T
    y = y_T
    blow_at = None
    for k in range(steps):
        with np.errstate(over="ignore", invalid="ignore"):
            k1 = rhs(y)
            k2 = rhs(y + 0.5 * h * k1)
            k3 = rhs(y + 0.5 * h * k2)
            k4 = rhs(y + h * k3)
            y = y + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not math.isfinite(y) or abs(y) > cap:
            blow_at = k + 1
            vals[k + 1 :] = math.copysign(math.inf, y) if not math.isnan(y) else math.inf
            break
        vals[k + 1] = y
    # τ-ordered (from T down to 0) → reverse to ascending t
    return vals[::-1].copy(), (None if blow_at is None else T - blow_at * h)


def _threshold(L1: float, L2: float, beta0: float, T: float, side: str) -> float:
    """T − ∫ dy/F over (L1, ∞) or (−∞, −L1); −∞ when the integral diverges."""
    if L1 <= 0.0 or L2 <= 0.0:
        # L2 = 0: F = L1(1+|y|) has a log-divergent tail; L1 = 0: 1/F ~ 1/(L2|y|) at 0.
        return -math.inf
    # F is even, so both sides share the integral.  With |y| = L1·e^w the
    # integrand is 1/(e^{-w} + c1 + c2·L1·e^w + c3·L1²·e^{2w}), bounded by 1/c1.
    c1 = L2 + L1 + L1 * L2 / beta0
    c2 = L2 + (L1 * L2 + L2 * L2) / beta0
    c3 = L2 * L2 / beta0
    f = lambda w: 1.0 / (math.exp(-w) + c1 + c2 * L1 * math.exp(w) + c3 * L1 * L1 * math.exp(2 * w))  # noqa: E731
    # Truncate where the tail bound min(e^{-W}/(c2 L1), e^{-2W}/(2 c3 L1²)) drops below 1e-15.
    w_end = 350.0
    if c2 * L1 > 0:
        w_end = min(w_end, math.log(1e15 / (c2 * L1)))
    if c3 > 0:
        w_end = min(w_end, 0.5 * math.log(1e15 / (2 * c3 * L1 * L1)))
    w_end = max(w_end, 1.0)
    edges = np.linspace(0.0, w_end, int(math.ceil(w_end / 10.0)) + 1)
    val = sum(integrate.quad(f, lo, hi, epsabs=1e-15, epsrel=1e-13)[0] for lo, hi in zip(edges[:-1], edges[1:]))
    return T - val


def solve_bound_odes(
    L1: float, L2: float, beta0: float, T: float, steps: int = 1000, cap: float = 1e8
) -> BoundOdeSolution:
    """Integrate s′ = −F(s), s(T) = L1 and l′ = F(l), l(T) = −L1 by RK4 on [0, T]."""
    if steps < 10:
        raise ValueError("steps ≥ 10 required")
    F = lambda y: F_eval(y, L1, L2, beta0)  # noqa: E731
    s, blow_s = _rk4_terminal(F, float(L1), T, steps, cap)
    l, blow_l = _rk4_terminal(lambda y: -F(y), -float(L1), T, steps, cap)
    t = np.linspace(0.0, T, steps + 1)
    t1 = _threshold(L1, L2, beta0, T, "lower")
    t2 = _threshold(L1, L2, beta0, T, "upper")
    times = [b for b in (blow_s, blow_l) if b is not None]
    return BoundOdeSolution(
        t=t,
        s=s,
        l=l,
        blowup=bool(times),
        blowup_time=max(times) if times else None,
        t1=t1,
        t2=t2,
        t_star=max(t1, t2),
        L1=float(L1),
        L2=float(L2),
        beta0=float(beta0),
        T=float(T),
    )


@dataclass(frozen=True)
class Assumption3Verdict:
    passed: bool
    margin: float
    bound: float
    t_star: float
    blowup: bool


def check_assumption3(ode: BoundOdeSolution, L3: float, beta0: float) -> Assumption3Verdict:
    """Pass iff t* < 0, no blow-up on [0, T], and [s(0) ∨ (−l(0))]·L3 ≤ 1 − β₀."""
    bound = ode.bound
    product = 0.0 if L3 == 0.0 and math.isfinite(bound) else bound * L3
    margin = (1.0 - beta0) - product
    passed = (ode.t_star < 0.0) and not ode.blowup and margin >= 0.0
    return Assumption3Verdict(bool(passed), float(margin), float(bound), float(ode.t_star), ode.blowup)


@dataclass(frozen=True)
class LambdaReport:
    values: dict[int, float | None]
    passed: dict[int, bool | None]
    c1: float
    advisory: bool = True


def lambda_beta(C_beta: Mapping[int, float], L2: float, L3: float, T: float) -> LambdaReport:
    """Λ_β = C_β 2^{β+1}(1 + T^β) c₁^β with c₁ = max(L2, L3), for β = 2..8.

    β without a supplied C_β report ``None``; the report is advisory.
    """
    c1 = max(L2, L3)
    values: dict[int, float | None] = {}
    passed: dict[int, bool | None] = {}
    for beta in BETAS:
        if beta in C_beta:
            lam = float(C_beta[beta]) * 2.0 ** (beta + 1) * (1.0 + T**beta) * c1**beta
            values[beta] = lam
            passed[beta] = lam < 1.0
        else:
            values[beta] = None
            passed[beta] = None
    return LambdaReport(values, passed, c1)


# --------------------------------------------------------------------------
# Monotonicity
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MonotonicityResult:
    passed: bool
    feasible: bool
    beta: tuple[float, float, float]
    worst_margin: float
    witness: dict | None
    samples: int


def _scan_max(feasible: Callable[[float], bool], hi: float = 10.0, coarse: float = 0.5, fine: float = 5e-4) -> float:
    """Largest value on a coarse-then-refined lattice in [0, hi] accepted by a down-closed test.

    Candidates are integer multiples of ``fine`` so results are exact
    lattice values.  Returns −1 when even 0 is infeasible.
    """
    if not feasible(0.0):
        return -1.0
    limit = int(round(hi / fine))
    best = 0
    stride = int(round(coarse / fine))
    while stride >= 1:
        while best + stride <= limit and feasible((best + stride) * fine):
            best += stride
        stride //= 10
    return best * fine


def _pair_samples(rng, box: SampleBox, n: int):
    raw = rng.random((n, 7))
    lo = np.array([box.t[0], box.x[0], box.y[0], box.z[0], box.x[0], box.y[0], box.z[0]])
    hi = np.array([box.t[1], box.x[1], box.y[1], box.z[1], box.x[1], box.y[1], box.z[1]])
    return (lo + raw * (hi - lo)).T


def check_monotonicity(
    coeffs: CoefficientSet,
    samples: int,
    seed: int,
    box: SampleBox | None = None,
    controls=None,
) -> MonotonicityResult:
    """Sample the dissipativity inequalities for Π = (−g, b, σ) and φ, and fit (β₁, β₂, β₃).

    For each control, ``samples`` point pairs are drawn.  β₁ is maximised
    first (with β₂ = 0), then β₂ given β₁; β₃ is separate.  The verdict
    requires feasibility, β₁+β₂ > 0 and β₂+β₃ > 0.
    """
    if samples < 2:
        raise ValueError("samples ≥ 2 required")
    box = box or SampleBox()
    controls = tuple(box.u if controls is None else controls)
    rng = np.random.default_rng(seed)
    lhs_all, a_all, c_all, coords = [], [], [], []
    for u in controls:
        s, x, y, z, x2, y2, z2 = _pair_samples(rng, box, samples)
        dx, dy, dz = x - x2, y - y2, z - z2
        lhs = (
            (-coeffs.g(s, x, y, z, u) + coeffs.g(s, x2, y2, z2, u)) * dx
            + (coeffs.b(s, x, y, z, u) - coeffs.b(s, x2, y2, z2, u)) * dy
            + (coeffs.sigma(s, x, y, z, u) - coeffs.sigma(s, x2, y2, z2, u)) * dz
        )
        lhs_all.append(lhs)
        a_all.append(dx * dx)
        c_all.append(dy * dy + dz * dz)
        coords.append(np.column_stack([s, x, y, z, x2, y2, z2, np.full_like(s, u)]))
    lhs = np.concatenate(lhs_all)
    a = np.concatenate(a_all)
    c = np.concatenate(c_all)
    pts = np.concatenate(coords)
    xs = rng.uniform(box.x[0], box.x[1], (samples, 2))
    dphi = (coeffs.phi(xs[:, 0]) - coeffs.phi(xs[:, 1])) * (xs[:, 0] - xs[:, 1])
    aphi = (xs[:, 0] - xs[:, 1]) ** 2

    scale = np.abs(lhs) + a + c
    ok12 = lambda b1, b2: bool(np.all(lhs + b1 * a + b2 * c <= 1e-12 * scale))  # noqa: E731
    ok3 = lambda b3: bool(np.all(dphi - b3 * aphi >= -1e-12 * (np.abs(dphi) + aphi)))  # noqa: E731

    b1 = _scan_max(lambda v: ok12(v, 0.0))
    b2 = _scan_max(lambda v: ok12(max(b1, 0.0), v)) if b1 >= 0 else -1.0
    b3 = _scan_max(ok3)
    feasible = b1 >= 0 and b2 >= 0 and b3 >= 0
    if feasible:
        m12 = -(lhs + b1 * a + b2 * c)
        m3 = dphi - b3 * aphi
        worst = float(min(m12.min(), m3.min()))
        passed = (b1 + b2 > 0) and (b2 + b3 > 0)
        witness = None
        beta = (b1, b2, b3)
    else:
        m12, m3 = -lhs, dphi
        worst = float(min(m12.min(), m3.min()))
        passed = False
        if m12.min() <= m3.min():
            i = int(np.argmin(m12))
            witness = dict(zip(("s", "x", "y", "z", "x2", "y2", "z2", "u"), map(float, pts[i])), kind="pi", value=float(lhs[i]))
        else:
            i = int(np.argmin(m3))
            witness = dict(x=float(xs[i, 0]), x2=float(xs[i, 1]), kind="phi", value=float(dphi[i]))
        beta = (max(b1, 0.0), max(b2, 0.0), max(b3, 0.0))
    return MonotonicityResult(bool(passed), bool(feasible), beta, worst, witness, int(lhs.size))


# --------------------------------------------------------------------------
# Regime classification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RegimeReport:
    regime: str
    flags: tuple[str, ...]
    a_tilde_t: tuple[float, ...]
    a_tilde: tuple[float, ...]
    rationale: str


def classify_regime(
    coeffs: CoefficientSet,
    probes: int = 64,
    seed: int = 0,
    box: SampleBox | None = None,
    convex_flag: bool = False,
    tol: float = 1e-9,
    h: float = 0.5,
) -> RegimeReport:
    """Detect σ = Ã(t)z + σ₁(t,x,y,u) by second differences in z, and the local-convex flag."""
    box = box or SampleBox()
    rng = np.random.default_rng(seed)
    n_t = max(2, int(math.isqrt(probes)))
    per_t = max(2, probes // n_t)
    ts = np.linspace(box.t[0], box.t[1], n_t)
    u_vals = np.asarray(box.u, dtype=float)
    curvature = 0.0
    spread = 0.0
    slopes = []
    for t in ts:
        x = rng.uniform(*box.x, per_t)
        y = rng.uniform(*box.y, per_t)
        z = rng.uniform(*box.z, per_t)
        u = u_vals[rng.integers(0, len(u_vals), per_t)]
        s0 = coeffs.sigma(t, x, y, z, u)
        sp = coeffs.sigma(t, x, y, z + h, u)
        sm = coeffs.sigma(t, x, y, z - h, u)
        scale = 1.0 + np.abs(s0)
        curvature = max(curvature, float(np.max(np.abs(sp - 2 * s0 + sm) / scale)))
        slope = (sp - sm) / (2 * h)
        spread = max(spread, float(np.max(slope) - np.min(slope)))
        slopes.append(float(np.mean(slope)))
    flags = []
    if convex_flag and coeffs.has_u_derivatives:
        flags.append("local_convex")
    if curvature <= tol and spread <= tol * 10:
        return RegimeReport(
            "linear_sigma",
            tuple(flags),
            tuple(map(float, ts)),
            tuple(slopes),
            f"sigma affine in z (max second difference {curvature:.2e}); slope depends on t only",
        )
    why = (
        f"curvature in z detected (max second difference {curvature:.2e})"
        if curvature > tol
        else f"z-slope varies with (x, y, u) (spread {spread:.2e})"
    )
    return RegimeReport("general", tuple(flags), (), (), why)


# --------------------------------------------------------------------------
# Aggregate report
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    lambda_beta: LambdaReport
    ode: BoundOdeSolution
    assumption3: Assumption3Verdict
    monotonicity: MonotonicityResult
    regime: RegimeReport
    lipschitz_estimate: dict[str, float]
    lipschitz_exceeded: tuple[str, ...]
    derivative_failures: tuple[str, ...]
    gates: dict[str, bool] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(self.gates.values())


def assess(scenario: Scenario) -> AssumptionReport:
    """Run every structural check for a scenario and evaluate the hard gates.

    Hard gates: derivative oracles agree with finite differences, declared
    Lipschitz constants are not exceeded beyond the slack, and either the
    contraction inequality with t* < 0 (general regimes) or the monotonicity
    conditions (local_convex regime, where the contraction verdict is
    reported without gating).
    """
    c = scenario.coefficients
    a = scenario.assumptions
    box = scenario.sample_box()
    ode = solve_bound_odes(c.L1, c.L2, scenario.beta0, scenario.horizon, a.ode_steps, a.blowup_cap)
    a3 = check_assumption3(ode, c.L3, scenario.beta0)
    mono = check_monotonicity(c, a.samples, a.seed, box)
    regime = classify_regime(c, seed=a.seed, box=box, convex_flag=scenario.controls.convex)
    est = estimate_lipschitz(c, a.samples, a.seed, box)
    exceeded = est.exceeds(c, scenario.tolerances.lipschitz_slack)
    deriv = validate_derivatives(c, min(a.samples, 500), a.seed, box, tol=scenario.tolerances.derivative)
    gates = {
        "derivatives": deriv.passed,
        "lipschitz": not exceeded,
    }
    # The local (convex-control) case rests on the monotonicity conditions for
    # well-posedness; the contraction inequality is then reported only.
    if scenario.regime == "local_convex":
        gates["monotonicity"] = mono.passed
    else:
        gates["assumption3"] = a3.passed
    return AssumptionReport(
        lambda_beta=lambda_beta(a.c_beta, c.L2, c.L3, scenario.horizon),
        ode=ode,
        assumption3=a3,
        monotonicity=mono,
        regime=regime,
        lipschitz_estimate={"L1": est.L1, "L2": est.L2, "L3": est.L3},
        lipschitz_exceeded=exceeded,
        derivative_failures=deriv.failures,
        gates=gates,
    )


def _json_float(v):
    if v is None:
        return None
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def report_to_dict(rep: AssumptionReport) -> dict:
    ode = rep.ode
    return {
        "passed": rep.passed,
        "gates": dict(rep.gates),
        "lambda_beta": {
            "advisory": True,
            "c1": rep.lambda_beta.c1,
            "values": {str(k): _json_float(v) for k, v in rep.lambda_beta.values.items()},
            "passed": {str(k): v for k, v in rep.lambda_beta.passed.items()},
        },
        "bound_odes": {
            "L1": ode.L1,
            "L2": ode.L2,
            "beta0": ode.beta0,
            "T": ode.T,
            "t1": _json_float(ode.t1),
            "t2": _json_float(ode.t2),
            "t_star": _json_float(ode.t_star),
            "blowup": ode.blowup,
            "blowup_time": _json_float(ode.blowup_time),
            "t": [_json_float(v) for v in ode.t],
            "s": [_json_float(v) for v in ode.s],
            "l": [_json_float(v) for v in ode.l],
        },
        "assumption3": {k: _json_float(v) if isinstance(v, float) else v for k, v in asdict(rep.assumption3).items()},
        "monotonicity": {
            "passed": rep.monotonicity.passed,
            "feasible": rep.monotonicity.feasible,
            "beta": list(rep.monotonicity.beta),
            "worst_margin": _json_float(rep.monotonicity.worst_margin),
            "witness": rep.monotonicity.witness,
            "samples": rep.monotonicity.samples,
        },
        "regime": {
            "regime": rep.regime.regime,
            "flags": list(rep.regime.flags),
            "a_tilde_t": list(rep.regime.a_tilde_t),
            "a_tilde": list(rep.regime.a_tilde),
            "rationale": rep.regime.rationale,
        },
        "lipschitz_estimate": rep.lipschitz_estimate,
        "lipschitz_exceeded": list(rep.lipschitz_exceeded),
        "derivative_failures": list(rep.derivative_failures),
    }
