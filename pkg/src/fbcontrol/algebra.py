"""Pointwise algebra: the fixed-point equations for V and Δ, the coupling
coefficients K1, K2, K̃2, and the Hamiltonians G, 𝓗, 𝓗₁ and H′.

All functions broadcast over numpy arrays.  Fixed-point iterations freeze
each element as soon as it has converged, so an element's result never
depends on which other elements were solved alongside it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractionMarginViolated, MissingDerivative, NoConvergence, SingularDenominator
from .problem import CoefficientSet, Jet

DEFAULT_TOL = 1e-12
DEFAULT_MAX_ITER = 200
DENOMINATOR_GUARD = 1e-12


def _out(a):
    a = np.asarray(a, dtype=float)
    return float(a) if a.ndim == 0 else a


@dataclass(frozen=True)
class AlgebraSolution:
    """Fixed-point solution with its iteration count and final residual.

    ``residual`` is ``max |value − map(value)|``; ``trace`` (if requested)
    holds the iterates z_0, z_1, … and ``steps`` the per-iteration residuals.
    """

    value: np.ndarray | float
    iterations: int
    residual: float
    trace: tuple[np.ndarray, ...] | None = None
    steps: tuple[np.ndarray, ...] | None = None


def check_margin(p, L3: float, beta0: float | None) -> None:
    """Raise unless |p|·L3 ≤ 1 − β₀ (or < 1 when β₀ is not given)."""
    if L3 == 0.0:
        return
    worst = float(np.max(np.abs(np.asarray(p, dtype=float)))) * L3
    if beta0 is None:
        if worst >= 1.0:
            raise ContractionMarginViolated(f"|p|·L3 = {worst:.6g} ≥ 1")
    elif worst > (1.0 - beta0) * (1.0 + 1e-14):
        raise ContractionMarginViolated(f"|p|·L3 = {worst:.6g} exceeds 1-beta0 = {1.0 - beta0:.6g}")


def picard(
    fmap: Callable[[np.ndarray], np.ndarray],
    z0,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    trace: bool = False,
) -> AlgebraSolution:
    """Elementwise Picard iteration z ← fmap(z) with per-element freezing.

    Iteration k evaluates r_k = |fmap(z_k) − z_k|; elements with r_k ≤ tol
    are accepted with value z_k, the others move to z_{k+1} = fmap(z_k).
    """
    z = np.array(z0, dtype=float, copy=True)
    active = np.ones(z.shape, dtype=bool)
    res = np.zeros(z.shape)
    iterates = [z.copy()] if trace else None
    steps = [] if trace else None
    for k in range(max_iter + 1):
        fz = np.asarray(fmap(z), dtype=float)
        if fz.shape != z.shape:
            z = np.broadcast_to(z, fz.shape).copy()
            active = np.broadcast_to(active, fz.shape).copy()
            res = np.broadcast_to(res, fz.shape).copy()
        step = np.abs(fz - z)
        if not np.all(np.isfinite(step[active])):
            raise NoConvergence("fixed-point iterate became non-finite")
        res = np.where(active, step, res)
        if trace:
            steps.append(step.copy())
        active = active & (step > tol)
        if not active.any():
            return AlgebraSolution(
                _out(z), k, float(np.max(res, initial=0.0)),
                tuple(iterates) if trace else None, tuple(steps) if trace else None,
            )
        z = np.where(active, fz, z)
        if trace:
            iterates.append(z.copy())
    raise NoConvergence(
        f"fixed point not reached in {max_iter} iterations (max residual {float(np.max(res)):.3g})"
    )


def solve_V(
    coeffs: CoefficientSet,
    t,
    x,
    v,
    p,
    u,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    beta0: float | None = None,
    z0=0.0,
    trace: bool = False,
) -> AlgebraSolution:
    """Solve V = p·σ(t, x, v, V, u) by Picard iteration."""
    check_margin(p, coeffs.L3, beta0)
    sigma = coeffs.sigma
    p = np.asarray(p, dtype=float)
    z0 = np.broadcast_to(np.asarray(z0, dtype=float), np.broadcast_shapes(*(np.shape(a) for a in (t, x, v, p, u))))
    return picard(lambda z: p * sigma(t, x, v, z, u), z0, tol, max_iter, trace)


def solve_Delta(
    coeffs: CoefficientSet,
    s,
    x_ref,
    y_ref,
    z_ref,
    u_ref,
    p,
    u,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    beta0: float | None = None,
    trace: bool = False,
) -> AlgebraSolution:
    """Solve Δ = p[σ(s, x̄, ȳ, z̄+Δ, u) − σ(s, x̄, ȳ, z̄, ū)] starting from Δ = 0."""
    check_margin(p, coeffs.L3, beta0)
    sigma = coeffs.sigma
    p = np.asarray(p, dtype=float)
    z_ref = np.asarray(z_ref, dtype=float)
    s_ref = sigma(s, x_ref, y_ref, z_ref, u_ref)
    shape = np.broadcast_shapes(*(np.shape(a) for a in (s, x_ref, y_ref, z_ref, u_ref, p, u)))
    return picard(lambda d: p * (sigma(s, x_ref, y_ref, z_ref + d, u) - s_ref), np.zeros(shape), tol, max_iter, trace)


# --------------------------------------------------------------------------
# Coupling coefficients
# --------------------------------------------------------------------------


def _denominator(sigma_z, p) -> np.ndarray:
    psz = np.asarray(p, dtype=float) * np.asarray(sigma_z, dtype=float)
    den = 1.0 - psz
    if np.any(np.abs(psz) >= 1.0) or np.any(np.abs(den) < DENOMINATOR_GUARD):
        raise SingularDenominator("|p·σ_z| ≥ 1 or 1 − p·σ_z below guard")
    return den


def quad_form(jet: Jet, v0, v1, v2):
    """(v0, v1, v2)·D²ψ·(v0, v1, v2)ᵀ summed term by term in row-major order."""
    h = jet.hessian()
    v = (v0, v1, v2)
    total = h[0][0] * v[0] * v[0]
    for i in range(3):
        for j in range(3):
            if i == 0 and j == 0:
                continue
            total = total + v[i] * h[i][j] * v[j]
    return total


def k1(sigma: Jet, p, q):
    """K1 = (1 − pσ_z)⁻¹ [σ_x p + σ_y p² + q]."""
    den = _denominator(sigma.dz, p)
    p = np.asarray(p, dtype=float)
    return _out((sigma.dx * p + sigma.dy * p * p + q) / den)


def _k2_core(sigma: Jet, p, P, Q, K1):
    den = _denominator(sigma.dz, p)
    p = np.asarray(p, dtype=float)
    first = (p * sigma.dy + 2.0 * (sigma.dx + sigma.dy * p + sigma.dz * K1)) * P / den
    second = (Q + p * quad_form(sigma, 1.0, p, K1)) / den
    return _out(first + second)


def k2(sigma: Jet, p, q, P, Q, K1=None):
    """K2 = (1−pσ_z)⁻¹{pσ_y + 2[σ_x + σ_y p + σ_z K1]}P + (1−pσ_z)⁻¹{Q + p·(1,p,K1)D²σ(1,p,K1)ᵀ}.

    ``q`` is only used to compute K1 when it is not supplied.
    """
    if K1 is None:
        K1 = k1(sigma, p, q)
    return _k2_core(sigma, p, P, Q, K1)


def k2_tilde(sigma: Jet, p, q, W_xx, W_xxx_sigma, K1=None):
    """K̃2: the K2 expression with P → W_xx and Q → W_xxx·σ."""
    if K1 is None:
        K1 = k1(sigma, p, q)
    return _k2_core(sigma, p, W_xx, W_xxx_sigma, K1)


# --------------------------------------------------------------------------
# Hamiltonians
# --------------------------------------------------------------------------


def G_and_V(
    coeffs: CoefficientSet,
    t,
    x,
    v,
    p,
    A,
    u,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    beta0: float | None = None,
    z0=0.0,
):
    """Return (G, AlgebraSolution for V)."""
    sol = solve_V(coeffs, t, x, v, p, u, tol, max_iter, beta0, z0)
    V = sol.value
    sig = coeffs.sigma(t, x, v, V, u)
    val = p * coeffs.b(t, x, v, V, u) + 0.5 * A * sig * sig + coeffs.g(t, x, v, V, u)
    return _out(val), sol


def G(coeffs, t, x, v, p, A, u, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, beta0=None):
    """G(t,x,v,p,A,u) = p·b + ½A·σ² + g evaluated at z = V(t,x,v,p,u)."""
    return G_and_V(coeffs, t, x, v, p, A, u, tol, max_iter, beta0)[0]


@dataclass(frozen=True)
class HamiltonianInputs:
    """Arguments of 𝓗: state point, control, adjoints and the reference point.

    The reference (x̄, ȳ, z̄) defaults to the state point; ū is required.
    """

    s: float | np.ndarray
    x: float | np.ndarray
    y: float | np.ndarray
    z: float | np.ndarray
    u: float | np.ndarray
    p: float | np.ndarray
    q: float | np.ndarray
    P: float | np.ndarray
    u_ref: float | np.ndarray
    x_ref: float | np.ndarray | None = None
    y_ref: float | np.ndarray | None = None
    z_ref: float | np.ndarray | None = None

    def __post_init__(self):
        for name in ("s", "x", "y", "z", "u", "p", "q", "P", "u_ref", "x_ref", "y_ref", "z_ref"):
            val = getattr(self, name)
            if val is not None and not np.all(np.isfinite(np.asarray(val, dtype=float))):
                raise ValueError(f"HamiltonianInputs.{name} must be finite")

    def reference(self):
        return (
            self.x if self.x_ref is None else self.x_ref,
            self.y if self.y_ref is None else self.y_ref,
            self.z if self.z_ref is None else self.z_ref,
        )


def hamiltonian_H(
    inputs: HamiltonianInputs,
    coeffs: CoefficientSet,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    beta0: float | None = None,
):
    """𝓗 = pb + qσ + g at z+Δ, plus ½P(σ(z+Δ, u) − σ(z̄, ū))²."""
    i = inputs
    xr, yr, zr = i.reference()
    delta = solve_Delta(coeffs, i.s, xr, yr, zr, i.u_ref, i.p, i.u, tol, max_iter, beta0).value
    zz = np.asarray(i.z, dtype=float) + delta
    sig = coeffs.sigma(i.s, i.x, i.y, zz, i.u)
    diff = sig - coeffs.sigma(i.s, xr, yr, zr, i.u_ref)
    val = i.p * coeffs.b(i.s, i.x, i.y, zz, i.u) + i.q * sig + coeffs.g(i.s, i.x, i.y, zz, i.u)
    return _out(val + 0.5 * i.P * diff * diff)


def hamiltonian_H1(
    coeffs: CoefficientSet,
    point: tuple,
    p,
    q,
    P,
    tol: float = DEFAULT_TOL,
    max_iter: int = DEFAULT_MAX_ITER,
    beta0: float | None = None,
):
    """𝓗₁ = −𝓗(s, x̄, ȳ, z̄, ū, p, q, P) + P·σ(s, x̄, ȳ, z̄, ū)².

    ``point`` is (s, x̄, ȳ, z̄, ū).
    """
    s, x, y, z, u = point
    inputs = HamiltonianInputs(s, x, y, z, u, p, q, P, u)
    sig = coeffs.sigma(s, x, y, z, u)
    return _out(-np.asarray(hamiltonian_H(inputs, coeffs, tol, max_iter, beta0)) + P * sig * sig)


def hamiltonian_Hprime(coeffs: CoefficientSet, point: tuple, u, h, m, n):
    """H′ = m·b + n·σ + h·g at (s, x, y, z, u) and its u-gradient.

    ``point`` is (s, x, y, z).  Returns ``(value, gradient)``.
    """
    if not coeffs.has_u_derivatives:
        raise MissingDerivative("u-derivative oracles are required for H′")
    s, x, y, z = point
    val = m * coeffs.b(s, x, y, z, u) + n * coeffs.sigma(s, x, y, z, u) + h * coeffs.g(s, x, y, z, u)
    grad = m * coeffs.b.du(s, x, y, z, u) + n * coeffs.sigma.du(s, x, y, z, u) + h * coeffs.g.du(s, x, y, z, u)
    return _out(val), _out(grad)
