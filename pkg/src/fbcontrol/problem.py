"""Problem data: coefficients with derivative oracles, control sets, scenarios.

Coefficient callables take ``(t, x, y, z, u)`` and broadcast over numpy
arrays.  Every coefficient carries explicit first and second derivative
oracles in ``(x, y, z)`` and, optionally, a first derivative in ``u``.

Scenario documents are TOML files with top-level keys (``horizon``,
``t0``, ``x0``, ``beta0``, ``regime``) and the sections ``[coefficients]``,
``[controls]``, ``[grid]``, ``[montecarlo]``, ``[tolerances]`` plus the
optional ``[assumptions]`` and ``[verify]``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import tomli_w

from .errors import NonFiniteOracle, ScenarioError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10 only
    import tomli as tomllib

REGIMES = ("general", "linear_sigma", "local_convex")
COEFFICIENT_NAMES = ("b", "sigma", "g")
AFFINE_KEYS = ("c0", "cx", "cy", "cz", "cu", "cuu", "sin_x", "sin_z")
TERMINAL_KEYS = ("c0", "cx", "cxx", "sin_x")


# --------------------------------------------------------------------------
# Coefficients
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Jet:
    """Value, gradient and Hessian of one coefficient in (x, y, z) at a point."""

    value: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    dz: np.ndarray
    dxx: np.ndarray
    dxy: np.ndarray
    dxz: np.ndarray
    dyy: np.ndarray
    dyz: np.ndarray
    dzz: np.ndarray

    def gradient(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.dx, self.dy, self.dz

    def hessian(self) -> tuple[tuple[np.ndarray, ...], ...]:
        """Full symmetric 3x3 Hessian as nested tuples (row-major)."""
        return (
            (self.dxx, self.dxy, self.dxz),
            (self.dxy, self.dyy, self.dyz),
            (self.dxz, self.dyz, self.dzz),
        )


@dataclass(frozen=True, eq=False)
class Coefficient:
    """A coefficient ψ(t, x, y, z, u) with its derivative oracles.

    ``grad`` returns ``(ψ_x, ψ_y, ψ_z)``; ``hess`` returns the six distinct
    Hessian entries ``(ψ_xx, ψ_xy, ψ_xz, ψ_yy, ψ_yz, ψ_zz)``; ``du`` is the
    optional u-derivative used by the local (convex-control) regime.
    """

    value: Callable[..., np.ndarray]
    grad: Callable[..., tuple]
    hess: Callable[..., tuple]
    du: Callable[..., np.ndarray] | None = None

    def __call__(self, t, x, y, z, u):
        return self.value(t, x, y, z, u)

    def jet(self, t, x, y, z, u) -> Jet:
        v = self.value(t, x, y, z, u)
        dx, dy, dz = self.grad(t, x, y, z, u)
        dxx, dxy, dxz, dyy, dyz, dzz = self.hess(t, x, y, z, u)
        return Jet(v, dx, dy, dz, dxx, dxy, dxz, dyy, dyz, dzz)


@dataclass(frozen=True, eq=False)
class Terminal:
    """Terminal cost φ(x) with φ_x and φ_xx."""

    value: Callable[[np.ndarray], np.ndarray]
    dx: Callable[[np.ndarray], np.ndarray]
    dxx: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        return self.value(x)


def _shape(*args) -> tuple[int, ...]:
    return np.broadcast_shapes(*(np.shape(a) for a in args))


def _const(shape, c: float) -> np.ndarray:
    return np.full(shape, float(c))


def affine_coefficient(
    c0: float = 0.0,
    cx: float = 0.0,
    cy: float = 0.0,
    cz: float = 0.0,
    cu: float = 0.0,
    cuu: float = 0.0,
    sin_x: float = 0.0,
    sin_z: float = 0.0,
) -> Coefficient:
    """ψ = c0 + cx·x + cy·y + cz·z + cu·u + ½cuu·u² + sin_x·sin x + sin_z·sin z.

    Zero terms are skipped entirely, so a coefficient that does not depend on
    a variable evaluates bit-identically whatever that variable holds.
    """
    c0, cx, cy, cz, cu, cuu, sin_x, sin_z = map(float, (c0, cx, cy, cz, cu, cuu, sin_x, sin_z))

    def value(t, x, y, z, u):
        out = _const(_shape(t, x, y, z, u), c0)
        if cx:
            out = out + cx * np.asarray(x, dtype=float)
        if cy:
            out = out + cy * np.asarray(y, dtype=float)
        if cz:
            out = out + cz * np.asarray(z, dtype=float)
        if cu:
            out = out + cu * np.asarray(u, dtype=float)
        if cuu:
            uu = np.asarray(u, dtype=float)
            out = out + 0.5 * cuu * uu * uu
        if sin_x:
            out = out + sin_x * np.sin(x)
        if sin_z:
            out = out + sin_z * np.sin(z)
        return out

    def grad(t, x, y, z, u):
        shape = _shape(t, x, y, z, u)
        dx = _const(shape, cx)
        if sin_x:
            dx = dx + sin_x * np.cos(x)
        dz = _const(shape, cz)
        if sin_z:
            dz = dz + sin_z * np.cos(z)
        return dx, _const(shape, cy), dz

    def hess(t, x, y, z, u):
        shape = _shape(t, x, y, z, u)
        zero = _const(shape, 0.0)
        dxx = -sin_x * np.sin(x) + zero if sin_x else zero
        dzz = -sin_z * np.sin(z) + zero if sin_z else zero
        return dxx, zero, zero, zero, zero, dzz

    def du(t, x, y, z, u):
        out = _const(_shape(t, x, y, z, u), cu)
        if cuu:
            out = out + cuu * np.asarray(u, dtype=float)
        return out

    return Coefficient(value, grad, hess, du)


def quadratic_terminal(c0: float = 0.0, cx: float = 0.0, cxx: float = 0.0, sin_x: float = 0.0) -> Terminal:
    """φ = c0 + cx·x + ½cxx·x² + sin_x·sin x."""
    c0, cx, cxx, sin_x = map(float, (c0, cx, cxx, sin_x))

    def value(x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, c0)
        if cx:
            out = out + cx * x
        if cxx:
            out = out + 0.5 * cxx * x * x
        if sin_x:
            out = out + sin_x * np.sin(x)
        return out

    def dx(x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, cx)
        if cxx:
            out = out + cxx * x
        if sin_x:
            out = out + sin_x * np.cos(x)
        return out

    def dxx(x):
        x = np.asarray(x, dtype=float)
        out = np.full(x.shape, cxx)
        if sin_x:
            out = out - sin_x * np.sin(x)
        return out

    return Terminal(value, dx, dxx)


def finite_difference_coefficient(fn: Callable[..., np.ndarray], h: float = 1e-4, with_du: bool = True) -> Coefficient:
    """Wrap a bare function with central finite-difference derivative oracles.

    This is an explicit opt-in: solvers never fall back to finite
    differences on their own.
    """

    def shifted(args, i, d):
        a = list(args)
        a[i] = np.asarray(a[i], dtype=float) + d
        return fn(*a)

    def grad(*args):
        return tuple((shifted(args, i, h) - shifted(args, i, -h)) / (2 * h) for i in (1, 2, 3))

    def second(args, i, j):
        if i == j:
            return (shifted(args, i, h) - 2 * np.asarray(fn(*args), dtype=float) + shifted(args, i, -h)) / (h * h)
        a = list(args)

        def f(di, dj):
            b = list(a)
            b[i] = np.asarray(b[i], dtype=float) + di
            b[j] = np.asarray(b[j], dtype=float) + dj
            return fn(*b)

        return (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4 * h * h)

    def hess(*args):
        return tuple(second(args, i, j) for i, j in ((1, 1), (1, 2), (1, 3), (2, 2), (2, 3), (3, 3)))

    def du(*args):
        return (shifted(args, 4, h) - shifted(args, 4, -h)) / (2 * h)

    return Coefficient(fn, grad, hess, du if with_du else None)


@dataclass(frozen=True, eq=False)
class CoefficientSet:
    """The problem data b, σ, g, φ plus declared Lipschitz constants.

    L1 bounds x-dependence of every coefficient and all arguments of g and φ;
    L2 bounds (y, z) in b and y in σ; L3 bounds z in σ.

    Sets built from a named family keep ``family`` and ``params`` so they can
    be written back to a scenario document; equality compares those.  Sets
    assembled from bare callables compare by identity.
    """

    b: Coefficient
    sigma: Coefficient
    g: Coefficient
    phi: Terminal
    L1: float
    L2: float
    L3: float
    family: str | None = None
    params: Mapping[str, Mapping[str, float]] | None = None
    lipschitz_declared: bool = False

    def __post_init__(self):
        for name in ("L1", "L2", "L3"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ScenarioError(f"coefficients.{name}", f"{name} must be a finite nonnegative real")

    def __eq__(self, other):
        if not isinstance(other, CoefficientSet):
            return NotImplemented
        if self.family is None or other.family is None:
            return self is other
        return (
            self.family == other.family
            and _freeze(self.params) == _freeze(other.params)
            and (self.L1, self.L2, self.L3) == (other.L1, other.L2, other.L3)
            and self.lipschitz_declared == other.lipschitz_declared
        )

    def __hash__(self):
        if self.family is None:
            return id(self)
        return hash((self.family, _freeze(self.params), self.L1, self.L2, self.L3))

    def coefficient(self, name: str) -> Coefficient:
        return {"b": self.b, "sigma": self.sigma, "g": self.g}[name]

    @property
    def has_u_derivatives(self) -> bool:
        return all(c.du is not None for c in (self.b, self.sigma, self.g))


def _freeze(params):
    if params is None:
        return None
    return tuple(sorted((k, tuple(sorted(v.items()))) for k, v in params.items()))


def affine_family(
    b: Mapping[str, float] | None = None,
    sigma: Mapping[str, float] | None = None,
    g: Mapping[str, float] | None = None,
    phi: Mapping[str, float] | None = None,
    state_box: tuple[float, float] = (-1.0, 1.0),
    L1: float | None = None,
    L2: float | None = None,
    L3: float | None = None,
) -> CoefficientSet:
    """Build the built-in ``affine`` family from per-coefficient parameter tables.

    Lipschitz constants default to exact bounds computed from the
    parameters (φ's bound taken over ``state_box``); explicit values override.
    """
    tables = {"b": dict(b or {}), "sigma": dict(sigma or {}), "g": dict(g or {}), "phi": dict(phi or {})}
    for name in COEFFICIENT_NAMES:
        unknown = set(tables[name]) - set(AFFINE_KEYS)
        if unknown:
            raise ScenarioError(f"coefficients.{name}", f"unknown keys {sorted(unknown)}")
        tables[name] = {k: float(v) for k, v in tables[name].items()}
    unknown = set(tables["phi"]) - set(TERMINAL_KEYS)
    if unknown:
        raise ScenarioError("coefficients.phi", f"unknown keys {sorted(unknown)}")
    tables["phi"] = {k: float(v) for k, v in tables["phi"].items()}

    def slope(name, var):
        p = tables[name]
        if var == "x":
            return abs(p.get("cx", 0.0)) + abs(p.get("sin_x", 0.0))
        if var == "y":
            return abs(p.get("cy", 0.0))
        return abs(p.get("cz", 0.0)) + abs(p.get("sin_z", 0.0))

    ph = tables["phi"]
    xmax = max(abs(state_box[0]), abs(state_box[1]))
    phi_slope = abs(ph.get("cx", 0.0)) + abs(ph.get("cxx", 0.0)) * xmax + abs(ph.get("sin_x", 0.0))
    auto_L1 = max(
        slope("b", "x"), slope("sigma", "x"), slope("g", "x"), slope("g", "y"), slope("g", "z"), phi_slope
    )
    auto_L2 = max(slope("b", "y"), slope("b", "z"), slope("sigma", "y"))
    auto_L3 = slope("sigma", "z")
    declared = any(v is not None for v in (L1, L2, L3))
    return CoefficientSet(
        b=affine_coefficient(**tables["b"]),
        sigma=affine_coefficient(**tables["sigma"]),
        g=affine_coefficient(**tables["g"]),
        phi=quadratic_terminal(**tables["phi"]),
        L1=float(auto_L1 if L1 is None else L1),
        L2=float(auto_L2 if L2 is None else L2),
        L3=float(auto_L3 if L3 is None else L3),
        family="affine",
        params=tables,
        lipschitz_declared=declared,
    )


FAMILIES: dict[str, Callable[..., CoefficientSet]] = {"affine": affine_family}


# --------------------------------------------------------------------------
# Controls and scenario
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ControlSet:
    """Finite discretization of the compact control set U (scalar controls)."""

    points: tuple[float, ...]
    convex: bool = False
    lower: float | None = None
    upper: float | None = None

    def __post_init__(self):
        pts = tuple(float(p) for p in self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise ScenarioError("controls.points", "control set must be nonempty")
        if not all(math.isfinite(p) for p in pts):
            raise ScenarioError("controls.points", "control points must be finite")
        if len(set(pts)) != len(pts):
            raise ScenarioError("controls.points", "duplicate control points")
        lo = min(pts) if self.lower is None else float(self.lower)
        hi = max(pts) if self.upper is None else float(self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if lo > hi or any(p < lo or p > hi for p in pts):
            raise ScenarioError("controls.points", "control points must lie inside the bounding box")

    @classmethod
    def uniform(cls, lower: float, upper: float, count: int, convex: bool = False) -> "ControlSet":
        if count < 1:
            raise ScenarioError("controls.count", "count ≥ 1 violated")
        pts = [float(lower)] if count == 1 else [float(v) for v in np.linspace(lower, upper, count)]
        return cls(tuple(pts), convex, float(lower), float(upper))

    @property
    def values(self) -> np.ndarray:
        return np.asarray(self.points, dtype=float)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Grid:
    time_steps: int = 200
    state_nodes: int = 200
    x_min: float = -3.0
    x_max: float = 3.0

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.state_nodes - 1)


@dataclass(frozen=True)
class MonteCarlo:
    paths: int = 2000
    seed: int = 12345
    steps: int | None = None
    basis_degree: int = 4
    exit_cap: float = 0.01


@dataclass(frozen=True)
class Tolerances:
    fixed_point: float = 1e-12
    max_iter: int = 200
    cfl: float = 1.0
    picard: float = 1e-6
    picard_max_sweeps: int = 60
    field: float = 2e-3
    regression: float = 1e-2
    mc_sigmas: float = 3.0
    relative: float = 0.05
    lipschitz_slack: float = 0.1
    derivative: float = 1e-6


@dataclass(frozen=True)
class AssumptionSettings:
    c_beta: Mapping[int, float] = field(default_factory=dict)
    samples: int = 2000
    ode_steps: int = 1000
    blowup_cap: float = 1e8
    sample_radius: float = 5.0
    seed: int = 7

    def __eq__(self, other):
        if not isinstance(other, AssumptionSettings):
            return NotImplemented
        return all(
            (dict(getattr(self, f.name)) if f.name == "c_beta" else getattr(self, f.name))
            == (dict(getattr(other, f.name)) if f.name == "c_beta" else getattr(other, f.name))
            for f in fields(self)
        )

    def __hash__(self):
        return hash((tuple(sorted(self.c_beta.items())), self.samples, self.ode_steps))


RELATION_IDS = (
    "DPP_CONSISTENCY",
    "MP_GLOBAL",
    "MP_LOCAL",
    "JET_SPACE",
    "JET_TIME",
    "SMOOTH_PQ",
    "SMOOTH_P2",
    "K1_VX",
    "K2_VXX",
    "LOCAL_MH",
    "VERIFICATION_THM",
)


@dataclass(frozen=True)
class VerifySettings:
    paths: int = 32
    times: int = 8
    ladder_steps: int = 4
    delta0: float | None = None
    tau_steps: int = 8
    random_maps: int = 2
    relations: tuple[str, ...] = RELATION_IDS

    def __post_init__(self):
        rel = tuple(self.relations)
        bad = [r for r in rel if r not in RELATION_IDS]
        if bad:
            raise ScenarioError("verify.relations", f"unknown relation ids {bad}")
        object.__setattr__(self, "relations", rel)


@dataclass(frozen=True)
class SampleBox:
    """Domain box used for sampling-based structural checks."""

    t: tuple[float, float] = (0.0, 1.0)
    x: tuple[float, float] = (-2.0, 2.0)
    y: tuple[float, float] = (-2.0, 2.0)
    z: tuple[float, float] = (-2.0, 2.0)
    u: tuple[float, ...] = (-1.0, 0.0, 1.0)


@dataclass(frozen=True)
class Scenario:
    coefficients: CoefficientSet
    controls: ControlSet
    horizon: float
    t0: float = 0.0
    x0: float = 0.0
    beta0: float = 0.5
    regime: str = "general"
    grid: Grid = field(default_factory=Grid)
    montecarlo: MonteCarlo = field(default_factory=MonteCarlo)
    tolerances: Tolerances = field(default_factory=Tolerances)
    assumptions: AssumptionSettings = field(default_factory=AssumptionSettings)
    verify: VerifySettings = field(default_factory=VerifySettings)
    name: str = "scenario"

    def __post_init__(self):
        validate_scenario(self)

    @property
    def mc_steps(self) -> int:
        return self.montecarlo.steps if self.montecarlo.steps is not None else self.grid.time_steps

    def sample_box(self) -> SampleBox:
        r = self.assumptions.sample_radius
        return SampleBox(
            t=(self.t0, self.horizon),
            x=(self.grid.x_min, self.grid.x_max),
            y=(-r, r),
            z=(-r, r),
            u=self.controls.points,
        )

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)


def validate_scenario(s: Scenario) -> None:
    """Check the scenario invariants, raising ``ScenarioError`` with the field name."""
    if not (math.isfinite(s.horizon) and s.horizon > 0):
        raise ScenarioError("horizon", "T > 0 violated")
    if not (0.0 <= s.t0 < s.horizon):
        raise ScenarioError("t0", "0 ≤ t < T violated")
    if not (0.0 < s.beta0 < 1.0):
        raise ScenarioError("beta0", "β₀ ∈ (0,1) violated")
    if s.regime not in REGIMES:
        raise ScenarioError("regime", f"regime must be one of {REGIMES}")
    g = s.grid
    if g.time_steps < 2:
        raise ScenarioError("grid.time_steps", "N_t ≥ 2 violated")
    if g.state_nodes < 3:
        raise ScenarioError("grid.state_nodes", "N_x ≥ 3 violated")
    if not g.x_min < g.x_max:
        raise ScenarioError("grid.x_min", "x_min < x_max violated")
    if not (g.x_min <= s.x0 <= g.x_max):
        raise ScenarioError("x0", "state box contains x violated")
    mc = s.montecarlo
    if mc.paths < 2:
        raise ScenarioError("montecarlo.paths", "M ≥ 2 violated")
    if mc.steps is not None and mc.steps < 2:
        raise ScenarioError("montecarlo.steps", "steps ≥ 2 violated")
    if not 0 <= mc.basis_degree <= 8:
        raise ScenarioError("montecarlo.basis_degree", "0 ≤ degree ≤ 8 violated")
    if not 0.0 <= mc.exit_cap <= 1.0:
        raise ScenarioError("montecarlo.exit_cap", "exit cap in [0,1] violated")
    tol = s.tolerances
    if not tol.fixed_point > 0 or tol.max_iter < 1:
        raise ScenarioError("tolerances.fixed_point", "positive tolerance and max_iter ≥ 1 required")
    if s.regime == "local_convex" and not s.controls.convex:
        raise ScenarioError("regime", "local_convex regime requires controls.convex = true")


# --------------------------------------------------------------------------
# Document I/O
# --------------------------------------------------------------------------

_TOP_KEYS = {"name", "horizon", "t0", "x0", "beta0", "regime"}
_SECTIONS = {"coefficients", "controls", "grid", "montecarlo", "tolerances", "assumptions", "verify"}


def _section(doc: Mapping, name: str, cls) -> Any:
    raw = dict(doc.get(name, {}))
    allowed = {f.name for f in fields(cls)}
    unknown = set(raw) - allowed
    if unknown:
        raise ScenarioError(name, f"unknown keys {sorted(unknown)}")
    return raw


def scenario_from_document(doc: Mapping[str, Any]) -> Scenario:
    """Build a validated Scenario from a parsed document mapping."""
    unknown = set(doc) - _TOP_KEYS - _SECTIONS
    if unknown:
        raise ScenarioError("document", f"unknown keys {sorted(unknown)}")
    for key in ("horizon",):
        if key not in doc:
            raise ScenarioError(key, "missing required key")

    grid = Grid(**_section(doc, "grid", Grid))
    coeff_doc = dict(doc.get("coefficients", {}))
    family = coeff_doc.pop("family", "affine")
    if family not in FAMILIES:
        raise ScenarioError("coefficients.family", f"unknown family {family!r}")
    overrides = {k: coeff_doc.pop(k) for k in ("L1", "L2", "L3") if k in coeff_doc}
    tables = {k: coeff_doc.pop(k) for k in ("b", "sigma", "g", "phi") if k in coeff_doc}
    if coeff_doc:
        raise ScenarioError("coefficients", f"unknown keys {sorted(coeff_doc)}")
    coefficients = FAMILIES[family](**tables, state_box=(grid.x_min, grid.x_max), **overrides)

    ctrl = dict(doc.get("controls", {}))
    convex = bool(ctrl.pop("convex", False))
    lower = ctrl.pop("lower", None)
    upper = ctrl.pop("upper", None)
    if "points" in ctrl:
        points = ctrl.pop("points")
        count = ctrl.pop("count", None)
        if count is not None and count != len(points):
            raise ScenarioError("controls.count", "count disagrees with points")
        controls = ControlSet(tuple(points), convex, lower, upper)
    elif "count" in ctrl:
        if lower is None or upper is None:
            raise ScenarioError("controls", "lower and upper are required with count")
        controls = ControlSet.uniform(lower, upper, int(ctrl.pop("count")), convex)
    else:
        raise ScenarioError("controls.points", "control set must be nonempty")
    if ctrl:
        raise ScenarioError("controls", f"unknown keys {sorted(ctrl)}")

    assum = _section(doc, "assumptions", AssumptionSettings)
    if "c_beta" in assum:
        assum["c_beta"] = {int(k): float(v) for k, v in dict(assum["c_beta"]).items()}
    verify = _section(doc, "verify", VerifySettings)
    if "relations" in verify:
        verify["relations"] = tuple(verify["relations"])

    return Scenario(
        coefficients=coefficients,
        controls=controls,
        horizon=float(doc["horizon"]),
        t0=float(doc.get("t0", 0.0)),
        x0=float(doc.get("x0", 0.0)),
        beta0=float(doc.get("beta0", 0.5)),
        regime=str(doc.get("regime", "general")),
        grid=grid,
        montecarlo=MonteCarlo(**_section(doc, "montecarlo", MonteCarlo)),
        tolerances=Tolerances(**_section(doc, "tolerances", Tolerances)),
        assumptions=AssumptionSettings(**assum),
        verify=VerifySettings(**verify),
        name=str(doc.get("name", "scenario")),
    )


def parse_scenario(text: str) -> Scenario:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError("document", f"parse failure: {exc}") from exc
    try:
        return scenario_from_document(doc)
    except TypeError as exc:
        raise ScenarioError("document", f"invalid value: {exc}") from exc


def load_scenario(path: str | Path) -> Scenario:
    """Load and validate a scenario document from ``path``."""
    p = Path(path)
    if not p.is_file():
        raise ScenarioError("path", f"scenario file not found: {p}")
    return parse_scenario(p.read_text(encoding="utf-8"))


def scenario_to_document(s: Scenario) -> dict[str, Any]:
    """Inverse of :func:`scenario_from_document` for family-built coefficients."""
    c = s.coefficients
    if c.family is None:
        raise ScenarioError("coefficients", "only family-built coefficient sets can be written out")
    coeff: dict[str, Any] = {"family": c.family}
    if c.lipschitz_declared:
        coeff.update(L1=c.L1, L2=c.L2, L3=c.L3)
    for k, v in c.params.items():
        coeff[k] = dict(v)
    mc = {f.name: getattr(s.montecarlo, f.name) for f in fields(MonteCarlo)}
    if mc["steps"] is None:
        del mc["steps"]
    verify = {f.name: getattr(s.verify, f.name) for f in fields(VerifySettings)}
    if verify["delta0"] is None:
        del verify["delta0"]
    verify["relations"] = list(verify["relations"])
    assum = {f.name: getattr(s.assumptions, f.name) for f in fields(AssumptionSettings)}
    assum["c_beta"] = {str(k): v for k, v in dict(assum["c_beta"]).items()}
    return {
        "name": s.name,
        "horizon": s.horizon,
        "t0": s.t0,
        "x0": s.x0,
        "beta0": s.beta0,
        "regime": s.regime,
        "coefficients": coeff,
        "controls": {
            "points": list(s.controls.points),
            "convex": s.controls.convex,
            "lower": s.controls.lower,
            "upper": s.controls.upper,
        },
        "grid": {f.name: getattr(s.grid, f.name) for f in fields(Grid)},
        "montecarlo": mc,
        "tolerances": {f.name: getattr(s.tolerances, f.name) for f in fields(Tolerances)},
        "assumptions": assum,
        "verify": verify,
    }


def dumps_scenario(s: Scenario) -> str:
    return tomli_w.dumps(scenario_to_document(s))


def dump_scenario(s: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(s), encoding="utf-8")


# --------------------------------------------------------------------------
# Structural checks
# --------------------------------------------------------------------------


def _sample_points(rng: np.random.Generator, box: SampleBox, n: int):
    """Draw ``n`` points row by row so that prefixes are seed-stable."""
    raw = rng.random((n, 5))
    lo = np.array([box.t[0], box.x[0], box.y[0], box.z[0]])
    hi = np.array([box.t[1], box.x[1], box.y[1], box.z[1]])
    pts = lo + raw[:, :4] * (hi - lo)
    u = np.asarray(box.u, dtype=float)
    idx = np.minimum((raw[:, 4] * len(u)).astype(int), len(u) - 1)
    return pts[:, 0], pts[:, 1], pts[:, 2], pts[:, 3], u[idx]


def _check_finite(name: str, arr) -> np.ndarray:
    a = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(a)):
        raise NonFiniteOracle(f"oracle {name} returned a non-finite value")
    return a


@dataclass(frozen=True)
class DerivativeReport:
    mismatch: dict[str, float]
    scale: dict[str, float]
    failures: tuple[str, ...]
    h: float
    tol: float

    @property
    def passed(self) -> bool:
        return not self.failures


def validate_derivatives(
    coeffs: CoefficientSet,
    samples: int,
    seed: int,
    box: SampleBox | None = None,
    h: float = 1e-4,
    tol: float = 1e-6,
) -> DerivativeReport:
    """Compare every derivative oracle with central finite differences.

    The mismatch of an oracle is ``max |oracle − FD|`` over the sampled
    points; it is flagged when it exceeds ``tol · (1 + max|ψ|)`` where ψ
    is the differentiated function (this scales for FD round-off).
    """
    if samples < 1:
        raise ValueError("samples ≥ 1 required")
    box = box or SampleBox()
    rng = np.random.default_rng(seed)
    t, x, y, z, u = _sample_points(rng, box, samples)
    args = [t, x, y, z, u]
    mismatch: dict[str, float] = {}
    scale: dict[str, float] = {}
    var = {"x": 1, "y": 2, "z": 3}

    def shift(i, d, j=None, e=0.0):
        a = list(args)
        a[i] = a[i] + d
        if j is not None:
            a[j] = a[j] + e
        return a

    for name in COEFFICIENT_NAMES:
        c = coeffs.coefficient(name)
        f = lambda a: _check_finite(f"{name}", c.value(*a))  # noqa: E731
        f0 = f(args)
        fscale = float(np.max(np.abs(f0)))
        grads = [_check_finite(f"{name}.d{v}", gi) for gi, v in zip(c.grad(*args), "xyz")]
        for gi, v in zip(grads, "xyz"):
            i = var[v]
            fd = (f(shift(i, h)) - f(shift(i, -h))) / (2 * h)
            mismatch[f"{name}.d{v}"] = float(np.max(np.abs(gi - fd)))
            scale[f"{name}.d{v}"] = fscale
        hess = c.hess(*args)
        for hij, (a_, b_) in zip(hess, ("xx", "xy", "xz", "yy", "yz", "zz")):
            hij = _check_finite(f"{name}.d{a_}{b_}", hij)
            i, j = var[a_], var[b_]
            if i == j:
                fd = (f(shift(i, h)) - 2 * f0 + f(shift(i, -h))) / (h * h)
            else:
                fd = (f(shift(i, h, j, h)) - f(shift(i, h, j, -h)) - f(shift(i, -h, j, h)) + f(shift(i, -h, j, -h))) / (
                    4 * h * h
                )
            mismatch[f"{name}.d{a_}{b_}"] = float(np.max(np.abs(hij - fd)))
            scale[f"{name}.d{a_}{b_}"] = fscale
        if c.du is not None:
            du = _check_finite(f"{name}.du", c.du(*args))
            fd = (f(shift(4, h)) - f(shift(4, -h))) / (2 * h)
            mismatch[f"{name}.du"] = float(np.max(np.abs(du - fd)))
            scale[f"{name}.du"] = fscale

    phi = coeffs.phi
    p0 = _check_finite("phi", phi(x))
    pscale = float(np.max(np.abs(p0)))
    px = _check_finite("phi.dx", phi.dx(x))
    pxx = _check_finite("phi.dxx", phi.dxx(x))
    mismatch["phi.dx"] = float(np.max(np.abs(px - (phi(x + h) - phi(x - h)) / (2 * h))))
    mismatch["phi.dxx"] = float(np.max(np.abs(pxx - (phi(x + h) - 2 * p0 + phi(x - h)) / (h * h))))
    scale["phi.dx"] = scale["phi.dxx"] = pscale

    failures = tuple(k for k, v in mismatch.items() if v > tol * (1.0 + scale[k]))
    return DerivativeReport(mismatch, scale, failures, h, tol)


@dataclass(frozen=True)
class LipschitzEstimate:
    L1: float
    L2: float
    L3: float
    quotients: dict[str, float]

    def exceeds(self, coeffs: CoefficientSet, slack: float) -> tuple[str, ...]:
        """Names of declared constants exceeded by more than ``(1+slack)``."""
        out = []
        for name in ("L1", "L2", "L3"):
            if getattr(self, name) > getattr(coeffs, name) * (1.0 + slack) + 1e-12:
                out.append(name)
        return tuple(out)


LIPSCHITZ_GROUPS = {
    "L1": ("b.x", "sigma.x", "g.x", "g.y", "g.z", "phi.x"),
    "L2": ("b.y", "b.z", "sigma.y"),
    "L3": ("sigma.z",),
}


def estimate_lipschitz(
    coeffs: CoefficientSet, samples: int, seed: int, box: SampleBox | None = None
) -> LipschitzEstimate:
    """Empirical lower bounds for (L1, L2, L3) from sampled difference quotients.

    Each sample draws a base point and an independent second value for each
    of x, y, z; quotients perturb one variable at a time.  Points are drawn
    row by row, so estimates are nondecreasing in ``samples`` for a fixed seed.
    """
    if samples < 2:
        raise ValueError("samples ≥ 2 required")
    box = box or SampleBox()
    rng = np.random.default_rng(seed)
    raw = rng.random((samples, 8))
    lo = np.array([box.t[0], box.x[0], box.y[0], box.z[0], box.x[0], box.y[0], box.z[0]])
    hi = np.array([box.t[1], box.x[1], box.y[1], box.z[1], box.x[1], box.y[1], box.z[1]])
    pts = lo + raw[:, :7] * (hi - lo)
    u_vals = np.asarray(box.u, dtype=float)
    u = u_vals[np.minimum((raw[:, 7] * len(u_vals)).astype(int), len(u_vals) - 1)]
    t, x, y, z, x2, y2, z2 = pts.T
    q: dict[str, float] = {}

    def quotient(fa, fb, da):
        mask = np.abs(da) > 1e-12
        if not mask.any():
            return 0.0
        return float(np.max(np.abs(fa[mask] - fb[mask]) / np.abs(da[mask])))

    for name in COEFFICIENT_NAMES:
        c = coeffs.coefficient(name)
        base = np.asarray(c(t, x, y, z, u), dtype=float)
        q[f"{name}.x"] = quotient(np.asarray(c(t, x2, y, z, u), dtype=float), base, x2 - x)
        q[f"{name}.y"] = quotient(np.asarray(c(t, x, y2, z, u), dtype=float), base, y2 - y)
        q[f"{name}.z"] = quotient(np.asarray(c(t, x, y, z2, u), dtype=float), base, z2 - z)
    q["phi.x"] = quotient(coeffs.phi(x2), coeffs.phi(x), x2 - x)
    L = {k: max(q[n] for n in names) for k, names in LIPSCHITZ_GROUPS.items()}
    return LipschitzEstimate(L["L1"], L["L2"], L["L3"], q)
