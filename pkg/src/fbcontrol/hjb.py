"""Explicit finite-difference solver for the generalized HJB equation

    W_t + min_{u∈U} G(t, x, W, W_x, W_xx, u) = 0,   W(T, ·) = φ,

where G embeds the per-node algebra solution V = W_x·σ(t, x, W, V, u).

Time levels are marched backward with explicit Euler; every control of the
(finite) control set is evaluated at every node and the pointwise minimum is
taken, ties going to the lowest control index.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import CubicSpline

from .algebra import G_and_V
from .errors import AlgebraMarginViolation, CFLViolation, NonLipschitzWarning
from .problem import Scenario

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ValueField:
    """Grid realization of W with its derivatives, argmin controls and V.

    Arrays are indexed ``[time_level, node]``.  ``W_x`` and ``W_xx`` are
    central differences in the interior and second-order one-sided
    differences at the two edges.
    """

    t: np.ndarray
    x: np.ndarray
    W: np.ndarray
    W_x: np.ndarray
    W_xx: np.ndarray
    u_index: np.ndarray
    controls: np.ndarray
    V: np.ndarray
    residual: float
    lipschitz: float
    lipschitz_per_level: np.ndarray
    max_cfl: float
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    @property
    def u_star(self) -> np.ndarray:
        return self.controls[self.u_index]

    # -- interpolation -----------------------------------------------------

    def _locate(self, values, grid):
        """Cell index and weight for linear interpolation, with clamping."""
        v = np.clip(np.asarray(values, dtype=float), grid[0], grid[-1])
        i = np.clip(np.searchsorted(grid, v, side="right") - 1, 0, len(grid) - 2)
        w = (v - grid[i]) / (grid[i + 1] - grid[i])
        return i, w

    def _bilinear(self, arr, t, x):
        t, x = np.broadcast_arrays(np.asarray(t, dtype=float), np.asarray(x, dtype=float))
        i, a = self._locate(t, self.t)
        j, b = self._locate(x, self.x)
        out = (
            (1 - a) * ((1 - b) * arr[i, j] + b * arr[i, j + 1])
            + a * ((1 - b) * arr[i + 1, j] + b * arr[i + 1, j + 1])
        )
        return float(out) if out.ndim == 0 else out

    def W_at(self, t, x):
        """Bilinear interpolation of W; points outside the box are clamped."""
        return self._bilinear(self.W, t, x)

    def Wx_at(self, t, x):
        return self._bilinear(self.W_x, t, x)

    def Wxx_at(self, t, x):
        return self._bilinear(self.W_xx, t, x)

    def time_index(self, t) -> np.ndarray:
        """Nearest time level."""
        t = np.asarray(t, dtype=float)
        return np.clip(np.rint((t - self.t[0]) / self.dt).astype(int), 0, len(self.t) - 1)

    def node_index(self, x) -> np.ndarray:
        """Nearest state node (clamped to the box)."""
        x = np.asarray(x, dtype=float)
        return np.clip(np.rint((x - self.x[0]) / self.dx).astype(int), 0, len(self.x) - 1)

    def spline(self, level: int) -> CubicSpline:
        """Not-a-knot cubic spline of W(t_level, ·); exact for cubic data."""
        return CubicSpline(self.x, self.W[level])

    def W_cubic(self, level: int, x, nu: int = 0):
        """Cubic-in-x evaluation of W (or its ``nu``-th derivative) at a grid time."""
        out = self.spline(level)(np.asarray(x, dtype=float), nu)
        return float(out) if np.ndim(out) == 0 else out


def _derivatives_for_step(W: np.ndarray, dx: float):
    """Derivatives used by the scheme: central inside, ghost-node linear extrapolation at edges.

    A ghost value W_{-1} = 2W_0 − W_1 gives W_xx = 0 and a one-sided W_x at
    the edges, so affine data are differentiated exactly.
    """
    Wx = np.empty_like(W)
    Wxx = np.empty_like(W)
    Wx[1:-1] = (W[2:] - W[:-2]) / (2 * dx)
    Wxx[1:-1] = (W[2:] - 2 * W[1:-1] + W[:-2]) / (dx * dx)
    Wx[0] = (W[1] - W[0]) / dx
    Wx[-1] = (W[-1] - W[-2]) / dx
    Wxx[0] = 0.0
    Wxx[-1] = 0.0
    return Wx, Wxx


def _derivatives_for_report(W: np.ndarray, dx: float):
    """Reported derivatives: central inside, second-order one-sided at the edges."""
    Wx = np.empty_like(W)
    Wxx = np.empty_like(W)
    Wx[1:-1] = (W[2:] - W[:-2]) / (2 * dx)
    Wxx[1:-1] = (W[2:] - 2 * W[1:-1] + W[:-2]) / (dx * dx)
    Wx[0] = (-3 * W[0] + 4 * W[1] - W[2]) / (2 * dx)
    Wx[-1] = (3 * W[-1] - 4 * W[-2] + W[-3]) / (2 * dx)
    if len(W) >= 4:
        Wxx[0] = (2 * W[0] - 5 * W[1] + 4 * W[2] - W[3]) / (dx * dx)
        Wxx[-1] = (2 * W[-1] - 5 * W[-2] + 4 * W[-3] - W[-4]) / (dx * dx)
    else:
        Wxx[0] = Wxx[-1] = Wxx[1]
    return Wx, Wxx


class _LevelEvaluator:
    """Evaluates min_u G on one time level, optionally split over worker threads."""

    def __init__(self, scenario: Scenario, x: np.ndarray, threads: int):
        self.s = scenario
        self.x = x
        self.u = scenario.controls.values[:, None]
        self.threads = max(1, int(threads))
        self.pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None
        n = len(x)
        bounds = np.linspace(0, n, self.threads + 1).astype(int)
        self.chunks = [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def close(self):
        if self.pool is not None:
            self.pool.shutdown()

    def _chunk(self, sl, t, W, Wx, Wxx, z0):
        tol = self.s.tolerances
        Gv, sol = G_and_V(
            self.s.coefficients, t, self.x[sl], W[sl], Wx[sl], Wxx[sl], self.u,
            tol.fixed_point, tol.max_iter, None, z0[:, sl],
        )
        return np.asarray(Gv), np.asarray(sol.value), sol.residual

    def __call__(self, t, W, Wx, Wxx, z0):
        if self.pool is None:
            Gv, V, res = self._chunk(slice(None), t, W, Wx, Wxx, z0)
        else:
            parts = list(self.pool.map(lambda sl: self._chunk(sl, t, W, Wx, Wxx, z0), self.chunks))
            Gv = np.concatenate([p[0] for p in parts], axis=1)
            V = np.concatenate([p[1] for p in parts], axis=1)
            res = max(p[2] for p in parts)
        Gv = np.broadcast_to(Gv, (self.u.shape[0], len(self.x)))
        V = np.broadcast_to(V, Gv.shape)
        return Gv, V, res


def _check_margin(Wx: np.ndarray, L3: float, beta0: float, level: int) -> None:
    if L3 == 0.0:
        return
    prod = np.abs(Wx) * L3
    j = int(np.argmax(prod))
    if prod[j] > 1.0 - beta0:
        raise AlgebraMarginViolation(level, j, float(prod[j]), 1.0 - beta0)


def solve_hjb(scenario: Scenario, threads: int = 1) -> ValueField:
    """March the HJB equation backward from W(T) = φ on the scenario grid.

    Level i is obtained from level i+1 as W_i = W_{i+1} + Δt·min_u G with G
    evaluated on level-i+1 data.  The algebra solve for V is warm-started
    from the previous level's V at the same node and control.

    Raises ``CFLViolation`` when Δt·max σ²/Δx² exceeds the configured factor
    and ``AlgebraMarginViolation`` when |W_x|·L3 > 1 − β₀ at a node.
    """
    s = scenario
    c = s.coefficients
    gr = s.grid
    N = gr.time_steps
    t = np.linspace(s.t0, s.horizon, N + 1)
    x = np.linspace(gr.x_min, gr.x_max, gr.state_nodes)
    dt = (s.horizon - s.t0) / N
    dx = gr.dx
    K = len(s.controls)
    M = len(x)

    W = np.empty((N + 1, M))
    u_index = np.empty((N + 1, M), dtype=np.int64)
    V = np.empty((N + 1, M))
    W[N] = np.asarray(c.phi(x), dtype=float) * np.ones(M)
    z_prev = np.zeros((K, M))
    residual = 0.0
    max_cfl = 0.0
    evaluate = _LevelEvaluator(s, x, threads)
    try:
        for i in range(N, -1, -1):
            Wx, Wxx = _derivatives_for_step(W[i], dx)
            _check_margin(Wx, c.L3, s.beta0, i)
            Gv, Vall, res = evaluate(t[i], W[i], Wx, Wxx, z_prev)
            residual = max(residual, res)
            k = np.argmin(Gv, axis=0)
            cols = np.arange(M)
            u_index[i] = k
            V[i] = Vall[k, cols]
            z_prev = np.array(Vall)
            sig = np.asarray(c.sigma(t[i], x, W[i], V[i], s.controls.values[k]), dtype=float)
            smax = float(np.max(sig * sig))
            cfl = dt * smax / (dx * dx)
            max_cfl = max(max_cfl, cfl)
            if cfl > s.tolerances.cfl:
                raise CFLViolation(dt, s.tolerances.cfl * dx * dx / smax, i)
            if i > 0:
                W[i - 1] = W[i] + dt * Gv[k, cols]
    finally:
        evaluate.close()

    Wx_r = np.empty_like(W)
    Wxx_r = np.empty_like(W)
    for i in range(N + 1):
        Wx_r[i], Wxx_r[i] = _derivatives_for_report(W[i], dx)
    lip = np.max(np.abs(np.diff(W, axis=1)), axis=1) / dx
    log.info("hjb solved: %d levels x %d nodes, max CFL %.3g, Lipschitz %.4g", N + 1, M, max_cfl, lip.max())
    return ValueField(
        t=t,
        x=x,
        W=W,
        W_x=Wx_r,
        W_xx=Wxx_r,
        u_index=u_index,
        controls=s.controls.values,
        V=V,
        residual=float(residual),
        lipschitz=float(lip.max()),
        lipschitz_per_level=lip,
        max_cfl=float(max_cfl),
    )


@dataclass(frozen=True)
class FeedbackPolicy:
    """Stored G-minimizing control and algebra value per grid node."""

    field: ValueField

    def __call__(self, t, x):
        """(u*, V) at the nearest grid node."""
        f = self.field
        i = f.time_index(t)
        j = f.node_index(x)
        u = f.controls[f.u_index[i, j]]
        return u, f.V[i, j]

    def index(self, i: int, j: int) -> int:
        return int(self.field.u_index[i, j])


def feedback_policy(field: ValueField) -> FeedbackPolicy:
    """Map (t_i, x_j) → (u*, V) using the stored argmin (lowest index on ties)."""
    return FeedbackPolicy(field)


# --------------------------------------------------------------------------
# Refinement study
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class OrderEstimate:
    """Self-convergence study on nested grids.

    ``differences[l]`` is max |W_l − W_{l+1}| on the coarse nodes at t0;
    ``order_dt`` and ``order_dx`` convert successive ratios into orders in Δt
    and Δx.  ``exact`` means every difference is at roundoff level, so no
    order can be estimated.  ``asserted`` is False when a guard (non-Lipschitz
    terminal data) fired.
    """

    grids: tuple[tuple[int, int], ...]
    differences: tuple[float, ...]
    order_dt: tuple[float, ...]
    order_dx: tuple[float, ...]
    exact: bool
    asserted: bool

    @property
    def observed_dt(self) -> float:
        return self.order_dt[-1] if self.order_dt else math.nan


def _terminal_slope(scenario: Scenario) -> float:
    x = np.linspace(scenario.grid.x_min, scenario.grid.x_max, scenario.grid.state_nodes)
    phi = np.asarray(scenario.coefficients.phi(x), dtype=float) * np.ones_like(x)
    return float(np.max(np.abs(np.diff(phi))) / scenario.grid.dx)


def refine_and_estimate_order(
    scenario: Scenario, levels: int = 3, time_factor: int = 4, threads: int = 1
) -> OrderEstimate:
    """Solve on nested grids (Δx/2 and Δt/time_factor per level) and estimate orders.

    The Richardson-style estimate compares consecutive levels on the coarsest
    nodes at the initial time.  A ``NonLipschitzWarning`` is issued (and the
    result marked not asserted) when φ's grid slope exceeds L1.
    """
    if levels < 3:
        raise ValueError("levels ≥ 3 required")
    asserted = True
    slope = _terminal_slope(scenario)
    L1 = scenario.coefficients.L1
    if slope > L1 * (1 + scenario.tolerances.lipschitz_slack) + 1e-12:
        warnings.warn(
            f"terminal function grid slope {slope:.4g} exceeds declared L1 = {L1:.4g}; order not asserted",
            NonLipschitzWarning,
            stacklevel=2,
        )
        asserted = False
    g0 = scenario.grid
    values = []
    grids = []
    for lvl in range(levels):
        nodes = (g0.state_nodes - 1) * 2**lvl + 1
        steps = g0.time_steps * time_factor**lvl
        sc = scenario.replace(grid=type(g0)(steps, nodes, g0.x_min, g0.x_max))
        f = solve_hjb(sc, threads)
        values.append(f.W[0, :: 2**lvl])
        grids.append((steps, nodes))
    diffs = [float(np.max(np.abs(values[l] - values[l + 1]))) for l in range(levels - 1)]
    scale = max(1.0, max(float(np.max(np.abs(v))) for v in values))
    exact = all(d <= 1e-12 * scale * max(g[0] for g in grids) for d in diffs)
    order_dt: list[float] = []
    order_dx: list[float] = []
    if not exact:
        for l in range(len(diffs) - 1):
            if diffs[l + 1] > 0 and diffs[l] > 0:
                r = diffs[l] / diffs[l + 1]
                order_dt.append(math.log(r) / math.log(time_factor))
                order_dx.append(math.log2(r))
            else:
                order_dt.append(math.inf)
                order_dx.append(math.inf)
    return OrderEstimate(tuple(grids), tuple(diffs), tuple(order_dt), tuple(order_dx), exact, asserted)


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

FIELD_HEADER = ("t", "x", "W", "Wx", "Wxx", "u_star", "V")


def _fmt(v: float) -> str:
    return "%.17g" % v


def write_field_csv(field: ValueField, path: str | Path) -> None:
    """Write the field time-major with full double precision."""
    u = field.u_star
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELD_HEADER)
        for i, ti in enumerate(field.t):
            for j, xj in enumerate(field.x):
                w.writerow(
                    [_fmt(ti), _fmt(xj), _fmt(field.W[i, j]), _fmt(field.W_x[i, j]),
                     _fmt(field.W_xx[i, j]), _fmt(u[i, j]), _fmt(field.V[i, j])]
                )


def read_field_csv(path: str | Path, controls) -> ValueField:
    """Rebuild a ``ValueField`` from its CSV export (controls give the index map)."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = np.unique(data[:, 0])
    x = np.unique(data[:, 1])
    shape = (len(t), len(x))
    controls = np.asarray(controls, dtype=float)
    u = data[:, 5].reshape(shape)
    idx = np.argmin(np.abs(u[..., None] - controls[None, None, :]), axis=-1)
    W = data[:, 2].reshape(shape)
    lip = np.max(np.abs(np.diff(W, axis=1)), axis=1) / (x[1] - x[0])
    return ValueField(
        t=t, x=x, W=W, W_x=data[:, 3].reshape(shape), W_xx=data[:, 4].reshape(shape),
        u_index=idx, controls=controls, V=data[:, 6].reshape(shape), residual=math.nan,
        lipschitz=float(lip.max()), lipschitz_per_level=lip, max_cfl=math.nan,
    )
