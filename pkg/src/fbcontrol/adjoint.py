"""Backward regression solvers for the adjoint equations along simulated paths.

First order (p, q) with coupling coefficient K1::

    −dp = { g_x + g_y p + g_z K1 + b_x p + b_y p² + b_z K1 p
            + σ_x q + σ_y p q + σ_z K1 q } ds − q dB,     p(T) = φ_x(X(T)).

Second order (P, Q) with K2::

    −dP = { P[(Dσ·v)² + 2 Db·v + H_y] + 2 Q Dσ·v + v D²H vᵀ + H_z K2 } ds − Q dB,
    P(T) = φ_xx(X(T)),   v = (1, p, K1),   H = g + p b + q σ.

Local case: the linear FBSDE for (h, m, n) with h(t) = 1 forward and
m(T) = φ_x(X(T)) h(T) backward, solved by Picard sweeps.

All coefficient derivatives are evaluated along the bundle's (X, Y, Z, u).
Conditional expectations use the shared polynomial regression; the
martingale integrand at step k is E[(ξ_{k+1} − Ê_k ξ_{k+1}) ΔB_k | X_k]/Δt.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .algebra import k1 as k1_fn
from .algebra import k2 as k2_fn
from .algebra import quad_form
from .errors import NoConvergence, PicardDivergence, RegressionRankDeficiency, SingularDenominator
from .fbsde import TrajectoryBundle
from .problem import Jet, Scenario
from .regression import make_regressor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AdjointPath:
    """Per-path adjoint arrays.

    ``p`` and ``P`` have shape (M, N+1); ``q``, ``Q``, ``K1`` and ``K2`` live on
    the N intervals and have shape (M, N).  ``P``, ``Q`` and ``K2`` are None
    until the second-order equation is solved.
    """

    t: np.ndarray
    p: np.ndarray
    q: np.ndarray
    K1: np.ndarray
    P: np.ndarray | None = None
    Q: np.ndarray | None = None
    K2: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict, compare=False)

    def with_second(self, P, Q, K2, diag: dict) -> "AdjointPath":
        d = dict(self.diagnostics)
        d.update(diag)
        return AdjointPath(self.t, self.p, self.q, self.K1, P, Q, K2, d)


@dataclass(frozen=True)
class LocalAdjointPath:
    """(h, m) of shape (M, N+1) and n of shape (M, N)."""

    t: np.ndarray
    h: np.ndarray
    m: np.ndarray
    n: np.ndarray
    diagnostics: dict = field(default_factory=dict, compare=False)


@dataclass(frozen=True)
class _StepJets:
    b: Jet
    sigma: Jet
    g: Jet


def _jets(scenario: Scenario, bundle: TrajectoryBundle, k: int) -> _StepJets:
    c = scenario.coefficients
    args = (bundle.t[k], bundle.X[:, k], bundle.Y[:, k], bundle.Z[:, k], bundle.u[:, k])
    return _StepJets(c.b.jet(*args), c.sigma.jet(*args), c.g.jet(*args))


def _damped_fixed_point(fmap, z0: np.ndarray, tol: float, max_iter: int, step: int):
    """Vector fixed point z = fmap(z) with ½-damping once the change ratio exceeds 0.9."""
    z = z0
    prev = math.inf
    for it in range(1, max_iter + 1):
        fz = fmap(z)
        change = float(np.max(np.abs(fz - z))) if z.size else 0.0
        if not math.isfinite(change):
            raise NoConvergence(f"per-step fixed point became non-finite at step {step}")
        if change <= tol:
            return fz, it
        z = 0.5 * (z + fz) if change > 0.9 * prev else fz
        prev = change
    raise NoConvergence(f"per-step fixed point did not converge at step {step}")


def first_adjoint_driver(j: _StepJets, p, q, K1):
    """Driver of the first-order adjoint equation (−dp = f ds − q dB)."""
    b, s, g = j.b, j.sigma, j.g
    return (
        g.dx + g.dy * p + g.dz * K1 + b.dx * p + b.dy * p * p + b.dz * K1 * p
        + s.dx * q + s.dy * p * q + s.dz * K1 * q
    )


def solve_first_adjoint(scenario: Scenario, bundle: TrajectoryBundle, bound: float | None = None) -> AdjointPath:
    """Backward Euler regression scheme for (p, q, K1).

    At step k: p̂ = E[p_{k+1} | X_k], q_k = E[(p_{k+1} − p̂)ΔB_k | X_k]/Δt, then
    p_k = p̂ + Δt·f(p_k, q_k, K1(p_k, q_k)) by a damped per-step fixed point
    with q frozen.  ``bound`` (if given) is the a-priori bound on |p| whose
    violations are counted in the diagnostics.
    """
    c = scenario.coefficients
    tol = scenario.tolerances
    deg = scenario.montecarlo.basis_degree
    M, N = bundle.dB.shape
    t = bundle.t
    p = np.empty((M, N + 1))
    q = np.empty((M, N))
    K1 = np.empty((M, N))
    p[:, N] = c.phi.dx(bundle.X[:, N])
    iters = np.zeros(N, dtype=int)
    conds = np.zeros(N)
    for k in range(N - 1, -1, -1):
        dt = t[k + 1] - t[k]
        reg = make_regressor(bundle.X[:, k], deg)
        conds[k] = reg.condition
        phat = reg.project(p[:, k + 1])
        qk = reg.project((p[:, k + 1] - phat) * bundle.dB[:, k]) / dt
        jets = _jets(scenario, bundle, k)

        def fmap(pk, jets=jets, qk=qk, phat=phat, dt=dt):
            return phat + dt * first_adjoint_driver(jets, pk, qk, k1_fn(jets.sigma, pk, qk))

        pk, iters[k] = _damped_fixed_point(fmap, phat.copy(), tol.fixed_point, tol.max_iter, k)
        p[:, k] = pk
        q[:, k] = qk
        K1[:, k] = k1_fn(jets.sigma, pk, qk)
    diag = {
        "fixed_point_iterations": iters.tolist(),
        "condition_numbers": conds.tolist(),
        "max_abs_q": float(np.max(np.abs(q))) if q.size else 0.0,
        "max_abs_p": float(np.max(np.abs(p))),
    }
    if bound is not None:
        viol = np.abs(p) > bound + tol.regression
        diag["bound"] = float(bound)
        diag["bound_violation_fraction"] = float(np.mean(viol))
    if scenario.regime == "linear_sigma":
        diag["q_flag"] = "informational"
    log.info("first adjoint solved: max|p| %.4g, max|q| %.4g", diag["max_abs_p"], diag["max_abs_q"])
    return AdjointPath(t, p, q, K1, diagnostics=diag)


def solve_second_adjoint(scenario: Scenario, bundle: TrajectoryBundle, first: AdjointPath) -> AdjointPath:
    """Backward regression scheme for (P, Q, K2) given (p, q, K1).

    With Q_k extracted first, the driver is affine in P_k (K2 is affine in
    P), so the per-step fixed point P_k = P̂ + Δt·F(P_k) is solved exactly as
    P_k = (P̂ + Δt·B)/(1 − Δt·A).
    """
    c = scenario.coefficients
    deg = scenario.montecarlo.basis_degree
    M, N = bundle.dB.shape
    t = bundle.t
    P = np.empty((M, N + 1))
    Q = np.empty((M, N))
    K2 = np.empty((M, N))
    P[:, N] = c.phi.dxx(bundle.X[:, N])
    conds = np.zeros(N)
    for k in range(N - 1, -1, -1):
        dt = t[k + 1] - t[k]
        reg = make_regressor(bundle.X[:, k], deg)
        conds[k] = reg.condition
        Phat = reg.project(P[:, k + 1])
        Qk = reg.project((P[:, k + 1] - Phat) * bundle.dB[:, k]) / dt
        j = _jets(scenario, bundle, k)
        pk, qk, K1k = first.p[:, k], first.q[:, k], first.K1[:, k]
        den = 1.0 - pk * j.sigma.dz
        if np.any(np.abs(pk * j.sigma.dz) >= 1.0):
            raise SingularDenominator(f"|p·σ_z| ≥ 1 at step {k}")
        sv = j.sigma.dx + j.sigma.dy * pk + j.sigma.dz * K1k
        bv = j.b.dx + j.b.dy * pk + j.b.dz * K1k
        H_y = j.g.dy + pk * j.b.dy + qk * j.sigma.dy
        H_z = j.g.dz + pk * j.b.dz + qk * j.sigma.dz
        quad_sigma = quad_form(j.sigma, 1.0, pk, K1k)
        quad_H = quad_form(j.g, 1.0, pk, K1k) + pk * quad_form(j.b, 1.0, pk, K1k) + qk * quad_sigma
        A = sv * sv + 2.0 * bv + H_y + H_z * (pk * j.sigma.dy + 2.0 * sv) / den
        B = 2.0 * Qk * sv + quad_H + H_z * (Qk + pk * quad_sigma) / den
        P[:, k] = (Phat + dt * B) / (1.0 - dt * A)
        Q[:, k] = Qk
        K2[:, k] = k2_fn(j.sigma, pk, qk, P[:, k], Qk, K1k)
    diag = {"second_condition_numbers": conds.tolist(), "max_abs_Q": float(np.max(np.abs(Q))) if Q.size else 0.0}
    return first.with_second(P, Q, K2, diag)


def second_adjoint_driver(j: _StepJets, p, q, K1, P, Q, K2):
    """Driver of the second-order adjoint equation evaluated term by term."""
    sv = j.sigma.dx + j.sigma.dy * p + j.sigma.dz * K1
    bv = j.b.dx + j.b.dy * p + j.b.dz * K1
    H_y = j.g.dy + p * j.b.dy + q * j.sigma.dy
    H_z = j.g.dz + p * j.b.dz + q * j.sigma.dz
    quad_H = quad_form(j.g, 1.0, p, K1) + p * quad_form(j.b, 1.0, p, K1) + q * quad_form(j.sigma, 1.0, p, K1)
    return P * (sv * sv + 2.0 * bv + H_y) + 2.0 * Q * sv + quad_H + H_z * K2


# --------------------------------------------------------------------------
# Local case
# --------------------------------------------------------------------------


def _local_regressor(x: np.ndarray, h: np.ndarray, degree: int):
    """Basis {X^i} ∪ {h·X^i}; falls back to {X^i} when h carries no extra information."""
    base = make_regressor(x, degree)
    if np.std(h) <= 1e-10 * (1.0 + abs(float(np.mean(h)))):
        return base
    try:
        return make_regressor(x, degree, multiplier=h)
    except RegressionRankDeficiency:
        return base


def solve_local_adjoint(scenario: Scenario, bundle: TrajectoryBundle) -> LocalAdjointPath:
    """Picard sweeps for the linear (h, m, n) system.

    Forward: h_{k+1} = h_k + (g_y h + b_y m + σ_y n)Δt + (g_z h + b_z m + σ_z n)ΔB_k, h_0 = 1.
    Backward: m_N = φ_x h_N; m̂ = E[m_{k+1} | X_k, h_k], n_k = E[(m_{k+1} − m̂)ΔB_k | ·]/Δt,
    m_k(1 − b_x Δt) = m̂ + (g_x h_k + σ_x n_k)Δt.
    """
    c = scenario.coefficients
    tol = scenario.tolerances
    deg = scenario.montecarlo.basis_degree
    M, N = bundle.dB.shape
    t = bundle.t
    jets = [_jets(scenario, bundle, k) for k in range(N)]
    h = np.ones((M, N + 1))
    m = np.zeros((M, N + 1))
    n = np.zeros((M, N))
    phi_x = c.phi.dx(bundle.X[:, N])
    changes: list[float] = []
    growing = 0
    converged = False
    for sweep in range(1, tol.picard_max_sweeps + 1):
        hn = np.empty_like(h)
        hn[:, 0] = 1.0
        for k in range(N):
            j = jets[k]
            dt = t[k + 1] - t[k]
            drift = j.g.dy * hn[:, k] + j.b.dy * m[:, k] + j.sigma.dy * n[:, k]
            vol = j.g.dz * hn[:, k] + j.b.dz * m[:, k] + j.sigma.dz * n[:, k]
            hn[:, k + 1] = hn[:, k] + drift * dt + vol * bundle.dB[:, k]
        mn = np.empty_like(m)
        nn = np.empty_like(n)
        mn[:, N] = phi_x * hn[:, N]
        for k in range(N - 1, -1, -1):
            j = jets[k]
            dt = t[k + 1] - t[k]
            reg = _local_regressor(bundle.X[:, k], hn[:, k], deg)
            mhat = reg.project(mn[:, k + 1])
            nn[:, k] = reg.project((mn[:, k + 1] - mhat) * bundle.dB[:, k]) / dt
            mn[:, k] = (mhat + (j.g.dx * hn[:, k] + j.sigma.dx * nn[:, k]) * dt) / (1.0 - j.b.dx * dt)
        change = math.sqrt(
            float(np.mean((hn - h) ** 2)) + float(np.mean((mn - m) ** 2)) + float(np.mean((nn - n) ** 2))
        )
        growing = growing + 1 if changes and change > changes[-1] else 0
        damp = len(changes) > 0 and changes[-1] > 0 and change / changes[-1] > 0.9 and change >= tol.picard
        changes.append(change)
        if growing >= 3:
            raise PicardDivergence(f"local adjoint sweep change grew for 3 consecutive sweeps (last {change:.3g})")
        if damp:
            h, m, n = 0.5 * (h + hn), 0.5 * (m + mn), 0.5 * (n + nn)
            h[:, 0] = 1.0
        else:
            h, m, n = hn, mn, nn
        if change < tol.picard:
            converged = True
            break
    if not converged:
        raise PicardDivergence(f"local adjoint did not converge in {tol.picard_max_sweeps} sweeps")
    # Damped averaging can leave m(T) off φ_x·h(T) by roundoff; re-impose it.
    m[:, N] = phi_x * h[:, N]
    diag = {"sweeps": len(changes), "changes": changes, "min_h": float(np.min(h))}
    return LocalAdjointPath(t, h, m, n, diag)


def local_relation_n(b_z, g_z, sigma_z, p, q, h):
    """n = (1 − pσ_z)⁻¹ [b_z p² + p g_z + q] h."""
    p = np.asarray(p, dtype=float)
    psz = p * np.asarray(sigma_z, dtype=float)
    if np.any(np.abs(psz) >= 1.0):
        raise SingularDenominator("|p·σ_z| ≥ 1 in the local n-relation")
    out = (np.asarray(b_z) * p * p + p * np.asarray(g_z) + np.asarray(q)) * np.asarray(h) / (1.0 - psz)
    return float(out) if np.ndim(out) == 0 else out


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

ADJOINT_HEADER = ("path_id", "t", "p", "q", "P", "Q", "K1", "K2")
LOCAL_HEADER = ("path_id", "t", "h", "m", "n")


def _cell(arr, i, k):
    if arr is None or k >= arr.shape[1]:
        return ""
    return "%.17g" % arr[i, k]


def write_adjoint_csv(adj: AdjointPath, path: str | Path) -> None:
    M, N1 = adj.p.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ADJOINT_HEADER)
        for i in range(M):
            for k in range(N1):
                w.writerow([i, "%.17g" % adj.t[k], _cell(adj.p, i, k), _cell(adj.q, i, k), _cell(adj.P, i, k),
                            _cell(adj.Q, i, k), _cell(adj.K1, i, k), _cell(adj.K2, i, k)])


def write_local_csv(loc: LocalAdjointPath, path: str | Path) -> None:
    M, N1 = loc.h.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOCAL_HEADER)
        for i in range(M):
            for k in range(N1):
                w.writerow([i, "%.17g" % loc.t[k], _cell(loc.h, i, k), _cell(loc.m, i, k), _cell(loc.n, i, k)])


def _read_table(path: str | Path, ncols: int):
    rows = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        next(r)
        for row in r:
            rows.append([float(v) if v != "" else math.nan for v in row])
    data = np.asarray(rows, dtype=float).reshape(-1, ncols)
    M = int(data[:, 0].max()) + 1
    N1 = data.shape[0] // M
    return data.reshape(M, N1, ncols)


def read_adjoint_csv(path: str | Path) -> AdjointPath:
    d = _read_table(path, len(ADJOINT_HEADER))
    t = d[0, :, 1]
    p, q, P, Q, K1, K2 = (d[:, :, i] for i in range(2, 8))
    has_second = not np.all(np.isnan(P))
    return AdjointPath(
        t, p.copy(), q[:, :-1].copy(), K1[:, :-1].copy(),
        P.copy() if has_second else None,
        Q[:, :-1].copy() if has_second else None,
        K2[:, :-1].copy() if has_second else None,
    )


def read_local_csv(path: str | Path) -> LocalAdjointPath:
    d = _read_table(path, len(LOCAL_HEADER))
    return LocalAdjointPath(d[0, :, 1], d[:, :, 2].copy(), d[:, :, 3].copy(), d[:, :, 4][:, :-1].copy())
