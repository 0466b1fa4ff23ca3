"""Monte Carlo simulation of the controlled, fully coupled FBSDE

    dX = b(s, X, Y, Z, u) ds + σ(s, X, Y, Z, u) dB,   X(t) = x,
    dY = −g(s, X, Y, Z, u) ds + Z dB,                 Y(T) = φ(X(T)).

Two modes are provided.  *Feedback* mode decouples the system through a
solved HJB field (Y = W(s, X), Z = V(s, X, W, W_x, u)).  *Picard* mode is
field-free: forward Euler–Maruyama and a backward least-squares regression
solve are alternated until the (Y, Z) samples stop changing.

Brownian increments come from one ``numpy.random.default_rng(seed)`` stream
filled row by row, so path i is the same for any number of paths ≥ i+1.
"""

from __future__ import annotations

import csv
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .algebra import solve_V
from .errors import PathExitError, PicardDivergence
from .hjb import FeedbackPolicy, ValueField, feedback_policy
from .problem import Scenario
from .regression import make_regressor

log = logging.getLogger(__name__)

MODES = ("feedback", "picard")


@dataclass(frozen=True)
class TrajectoryBundle:
    """Paths of (X, Y, Z, u) on a common time grid.

    ``X``, ``Y`` and ``u`` have shape (M, N+1); ``Z`` and ``dB`` have shape
    (M, N) (Z is constant on each interval).  ``Y`` is the decoupled
    (field or regression) value with Y[:, N] = φ(X[:, N]) exactly;
    ``Y_path`` is the pathwise backward integral
    Y_path[k] = Y_path[k+1] + g·Δt − Z_k·ΔB_k started from the same terminal.
    """

    t: np.ndarray
    dB: np.ndarray
    X: np.ndarray
    Y: np.ndarray
    Z: np.ndarray
    u: np.ndarray
    Y_path: np.ndarray
    seed: int
    mode: str
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def paths(self) -> int:
        return self.X.shape[0]

    @property
    def steps(self) -> int:
        return self.dB.shape[1]

    @property
    def dt(self) -> float:
        """Uniform step (T − t)/N, the value used to scale the increments."""
        return float((self.t[-1] - self.t[0]) / self.steps)


def brownian_increments(seed: int, paths: int, steps: int, dt: float) -> np.ndarray:
    """ΔB of shape (paths, steps) drawn row-major from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    return rng.standard_normal((paths, steps)) * math.sqrt(dt)


def _time_grid(scenario: Scenario, steps: int | None) -> np.ndarray:
    n = scenario.mc_steps if steps is None else int(steps)
    return np.linspace(scenario.t0, scenario.horizon, n + 1)


def _backward_path(scenario: Scenario, t, X, Y, Z, u, dB) -> np.ndarray:
    """Pathwise Y_k = Y_{k+1} + g(t_k, X_k, Y_k, Z_k, u_k)Δt − Z_kΔB_k with Y_N = φ(X_N)."""
    c = scenario.coefficients
    M, N = dB.shape
    out = np.empty((M, N + 1))
    out[:, N] = Y[:, N]
    for k in range(N - 1, -1, -1):
        dt = t[k + 1] - t[k]
        gk = c.g(t[k], X[:, k], Y[:, k], Z[:, k], u[:, k])
        out[:, k] = out[:, k + 1] + gk * dt - Z[:, k] * dB[:, k]
    return out


def _check_exits(scenario: Scenario, X: np.ndarray) -> float:
    g = scenario.grid
    out = np.any((X < g.x_min) | (X > g.x_max), axis=1)
    frac = float(np.mean(out))
    if frac > scenario.montecarlo.exit_cap:
        raise PathExitError(frac, scenario.montecarlo.exit_cap)
    return frac


def simulate_feedback(
    scenario: Scenario,
    field: ValueField,
    policy: FeedbackPolicy | None = None,
    paths: int | None = None,
    steps: int | None = None,
    seed: int | None = None,
) -> TrajectoryBundle:
    """Forward Euler–Maruyama under the field's feedback control.

    At each step: u from the policy at the nearest node, Y = W(t, X) by
    bilinear interpolation, Z = V(t, X, Y, W_x(t, X), u) from the algebra
    equation.  Paths leaving the box are clamped for interpolation and
    counted; ``PathExitError`` is raised when the exit fraction exceeds the cap.
    """
    c = scenario.coefficients
    mc = scenario.montecarlo
    policy = policy or feedback_policy(field)
    M = mc.paths if paths is None else int(paths)
    seed = mc.seed if seed is None else int(seed)
    t = _time_grid(scenario, steps)
    N = len(t) - 1
    dt = (scenario.horizon - scenario.t0) / N
    dB = brownian_increments(seed, M, N, dt)
    tol = scenario.tolerances
    X = np.empty((M, N + 1))
    Y = np.empty((M, N + 1))
    Z = np.empty((M, N))
    U = np.empty((M, N + 1))
    X[:, 0] = scenario.x0
    iters = 0
    for k in range(N + 1):
        xk = X[:, k]
        U[:, k] = policy(t[k], xk)[0]
        if k == N:
            break
        Y[:, k] = field.W_at(t[k], xk)
        Wx = field.Wx_at(t[k], xk)
        sol = solve_V(c, t[k], xk, Y[:, k], Wx, U[:, k], tol.fixed_point, tol.max_iter)
        iters = max(iters, sol.iterations)
        Z[:, k] = sol.value
        h = t[k + 1] - t[k]
        X[:, k + 1] = (
            xk + c.b(t[k], xk, Y[:, k], Z[:, k], U[:, k]) * h + c.sigma(t[k], xk, Y[:, k], Z[:, k], U[:, k]) * dB[:, k]
        )
    Y[:, N] = c.phi(X[:, N])
    frac = _check_exits(scenario, X)
    Y_path = _backward_path(scenario, t, X, Y, Z, U, dB)
    resid = np.abs(Y_path - Y)
    diag = {
        "exit_fraction": frac,
        "max_algebra_iterations": iters,
        "consistency_median": float(np.median(resid[:, 0])),
        "consistency_max": float(np.max(resid)),
    }
    log.info("feedback simulation: %d paths x %d steps, exit fraction %.3g", M, N, frac)
    return TrajectoryBundle(t, dB, X, Y, Z, U, Y_path, seed, "feedback", diag)


ControlSpec = float | np.ndarray | Callable[[float, np.ndarray], np.ndarray]


def _control_at(control, k: int, t: float, x: np.ndarray, M: int) -> np.ndarray:
    if callable(control):
        return np.broadcast_to(np.asarray(control(t, x), dtype=float), (M,)).astype(float)
    arr = np.asarray(control, dtype=float)
    if arr.ndim == 0:
        return np.full(M, float(arr))
    return np.broadcast_to(arr[..., k] if arr.ndim == 2 else arr[k], (M,)).astype(float)


def simulate_picard(
    scenario: Scenario,
    control: ControlSpec,
    paths: int | None = None,
    steps: int | None = None,
    seed: int | None = None,
    lambda_override: bool = True,
    freeze_feedback: bool = False,
) -> TrajectoryBundle:
    """Field-free solve by forward/backward Picard sweeps with regression.

    ``control`` is a constant, an array of shape (N+1,) or (M, N+1), or a
    feedback map ``(t, X) -> u``.  Each sweep runs Euler–Maruyama for X given
    the current (Y, Z) samples, then the backward regression scheme
    Y_N = φ(X_N), Z_k = E[(Y_{k+1} − Ŷ_k)ΔB_k | X_k]/Δt,
    Y_k = Ŷ_k + g(t_k, X_k, Ŷ_k, Z_k, u_k)Δt with Ŷ_k = E[Y_{k+1} | X_k].
    Iteration stops when the sample-L² change of (Y, Z) drops below the
    Picard tolerance; updates are damped by ½ once the change ratio exceeds
    0.9, and ``PicardDivergence`` is raised after three growing sweeps.

    With ``freeze_feedback`` a callable control is evaluated along the first
    sweep's forward path only and then held fixed as an adapted control
    process.  Discontinuous feedback maps otherwise make the sweep map
    non-contractive when X depends on (Y, Z).
    """
    if not lambda_override:
        raise ValueError("the well-posedness smallness check must pass or be overridden")
    c = scenario.coefficients
    mc = scenario.montecarlo
    tol = scenario.tolerances
    M = mc.paths if paths is None else int(paths)
    seed = mc.seed if seed is None else int(seed)
    t = _time_grid(scenario, steps)
    N = len(t) - 1
    dt = (scenario.horizon - scenario.t0) / N
    dB = brownian_increments(seed, M, N, dt)
    X = np.empty((M, N + 1))
    U = np.empty((M, N + 1))
    Y = np.zeros((M, N + 1))
    Z = np.zeros((M, N))
    changes: list[float] = []
    ratios: list[float] = []
    conds: list[float] = []
    damped = 0
    growing = 0
    converged = False
    for sweep in range(1, tol.picard_max_sweeps + 1):
        X[:, 0] = scenario.x0
        for k in range(N):
            xk = X[:, k]
            U[:, k] = _control_at(control, k, t[k], xk, M)
            X[:, k + 1] = xk + c.b(t[k], xk, Y[:, k], Z[:, k], U[:, k]) * dt + c.sigma(
                t[k], xk, Y[:, k], Z[:, k], U[:, k]
            ) * dB[:, k]
        U[:, N] = _control_at(control, N, t[N], X[:, N], M)
        Yn = np.empty_like(Y)
        Zn = np.empty_like(Z)
        Yn[:, N] = c.phi(X[:, N])
        step_cond = 1.0
        for k in range(N - 1, -1, -1):
            reg = make_regressor(X[:, k], mc.basis_degree)
            step_cond = max(step_cond, reg.condition)
            yhat = reg.project(Yn[:, k + 1])
            Zn[:, k] = reg.project((Yn[:, k + 1] - yhat) * dB[:, k]) / dt
            Yn[:, k] = yhat + c.g(t[k], X[:, k], yhat, Zn[:, k], U[:, k]) * dt
        conds.append(step_cond)
        if freeze_feedback and callable(control):
            control = U.copy()
        change = math.sqrt(float(np.mean((Yn - Y) ** 2)) + float(np.mean((Zn - Z) ** 2)))
        if changes and changes[-1] > 0:
            ratios.append(change / changes[-1])
        growing = growing + 1 if changes and change > changes[-1] else 0
        changes.append(change)
        if growing >= 3:
            raise PicardDivergence(f"sweep change grew for 3 consecutive sweeps (last {change:.3g})")
        if ratios and ratios[-1] > 0.9 and change >= tol.picard:
            Y = 0.5 * Y + 0.5 * Yn
            Z = 0.5 * Z + 0.5 * Zn
            Y[:, N] = Yn[:, N]
            damped += 1
        else:
            Y, Z = Yn, Zn
        if change < tol.picard:
            converged = True
            break
    if not converged:
        raise PicardDivergence(f"no Picard convergence in {tol.picard_max_sweeps} sweeps (last change {changes[-1]:.3g})")
    frac = float(np.mean(np.any((X < scenario.grid.x_min) | (X > scenario.grid.x_max), axis=1)))
    Y_path = _backward_path(scenario, t, X, Y, Z, U, dB)
    diag = {
        "sweeps": len(changes),
        "changes": changes,
        "ratios": ratios,
        "damped_sweeps": damped,
        "condition_numbers": conds,
        "exit_fraction": frac,
    }
    log.info("picard simulation: %d sweeps, final change %.3g", len(changes), changes[-1])
    return TrajectoryBundle(t, dB, X.copy(), Y.copy(), Z.copy(), U.copy(), Y_path, seed, "picard", diag)


@dataclass(frozen=True)
class CostEstimate:
    mean: float
    stderr: float
    paths: int


def cost(bundle: TrajectoryBundle) -> CostEstimate:
    """Mean and standard error of the pathwise Y at the initial time."""
    y0 = bundle.Y_path[:, 0]
    if y0.size == 0:
        raise ValueError("empty bundle")
    # statistics of deviations from the first sample: exact for constant samples
    d = y0 - y0[0]
    se = float(np.std(d, ddof=1) / math.sqrt(y0.size)) if y0.size > 1 else 0.0
    return CostEstimate(float(y0[0] + np.mean(d)), se, int(y0.size))


@dataclass(frozen=True)
class DppResidual:
    """Distribution of |Y_path(s) − W(s, X(s))| at a probe time."""

    time_index: int
    s: float
    median: float
    mean: float
    max: float
    quantile_90: float
    tolerance: float
    flagged: bool


def dpp_consistency(scenario: Scenario, field: ValueField, bundle: TrajectoryBundle, s: float) -> DppResidual:
    """Compare the pathwise backward value with the field along the paths at time s.

    The probe must lie strictly inside (t, T) on the bundle grid.  The
    residual is flagged when its median exceeds the field tolerance plus
    the O(√Δt) Euler error of the pathwise integral (scaled by the size of Z).
    """
    k = int(round((s - bundle.t[0]) / bundle.dt))
    if not (0 < k < bundle.steps) or abs(bundle.t[k] - s) > 1e-9 * max(1.0, abs(s)):
        raise ValueError("probe time must be an interior point of the bundle time grid")
    r = np.abs(bundle.Y_path[:, k] - field.W_at(bundle.t[k], bundle.X[:, k]))
    zscale = float(np.sqrt(np.mean(bundle.Z**2))) if bundle.Z.size else 0.0
    tol = scenario.tolerances.field + zscale * math.sqrt(bundle.dt)
    med = float(np.median(r))
    return DppResidual(
        k, float(bundle.t[k]), med, float(np.mean(r)), float(np.max(r)), float(np.quantile(r, 0.9)), tol, med > tol
    )


# --------------------------------------------------------------------------
# Export
# --------------------------------------------------------------------------

TRAJECTORY_HEADER = ("path_id", "t", "X", "Y", "Z", "u")
BINARY_MAGIC = b"FBTRAJ\0\0"
BINARY_VERSION = 1


def write_trajectories_csv(bundle: TrajectoryBundle, path: str | Path) -> None:
    """Rows ordered by path then time; Z is empty at the terminal time."""
    M, N = bundle.dB.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_HEADER)
        for i in range(M):
            for k in range(N + 1):
                z = "%.17g" % bundle.Z[i, k] if k < N else ""
                w.writerow([i, "%.17g" % bundle.t[k], "%.17g" % bundle.X[i, k], "%.17g" % bundle.Y[i, k], z, "%.17g" % bundle.u[i, k]])


def write_trajectories_binary(bundle: TrajectoryBundle, path: str | Path) -> None:
    """Little-endian layout.

    header: 8-byte magic ``FBTRAJ\\0\\0``, uint32 version, uint32 M, uint32 N,
    uint32 mode (0 feedback, 1 picard), uint64 seed; then float64 arrays in
    row-major order: t (N+1), dB (M×N), X, Y, u, Y_path (M×(N+1) each), Z (M×N).
    """
    M, N = bundle.dB.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<IIIIQ", BINARY_VERSION, M, N, MODES.index(bundle.mode), bundle.seed))
        for arr in (bundle.t, bundle.dB, bundle.X, bundle.Y, bundle.u, bundle.Y_path, bundle.Z):
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_trajectories_binary(path: str | Path) -> TrajectoryBundle:
    data = Path(path).read_bytes()
    if data[:8] != BINARY_MAGIC:
        raise ValueError("not a trajectory file (bad magic)")
    version, M, N, mode, seed = struct.unpack_from("<IIIIQ", data, 8)
    if version != BINARY_VERSION:
        raise ValueError(f"unsupported trajectory file version {version}")
    off = 8 + struct.calcsize("<IIIIQ")

    def take(shape):
        nonlocal off
        n = int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(float)
        off += 8 * n
        return arr

    t = take((N + 1,))
    dB = take((M, N))
    X, Y, u, Y_path = (take((M, N + 1)) for _ in range(4))
    Z = take((M, N))
    return TrajectoryBundle(t, dB, X, Y, Z, u, Y_path, int(seed), MODES[mode])
