"""Exception hierarchy shared by all solver stages.

The CLI maps these onto exit codes: ``ScenarioError`` is an input error,
everything deriving from ``NumericalFailure`` is a numerical failure.
"""

from __future__ import annotations


class FbControlError(Exception):
    """Base class for all package errors."""


class ScenarioError(FbControlError, ValueError):
    """A scenario document failed to parse or violated an invariant."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class MissingDerivative(FbControlError):
    """A derivative oracle required by the requested operation is absent."""


class NumericalFailure(FbControlError):
    """Base class for failures of a numerical scheme."""


class ContractionMarginViolated(NumericalFailure):
    """|p|·L3 exceeds 1 − β₀, so the fixed-point map is not a contraction."""


class AlgebraMarginViolation(ContractionMarginViolated):
    """Contraction margin violated at an HJB grid node."""

    def __init__(self, time_index: int, node: int, value: float, bound: float):
        self.time_index = time_index
        self.node = node
        self.value = value
        self.bound = bound
        super().__init__(
            f"|W_x|·L3 = {value:.6g} exceeds 1-beta0 = {bound:.6g} "
            f"at time level {time_index}, node {node}"
        )


class NoConvergence(NumericalFailure):
    """A fixed-point iteration hit its iteration cap."""


class SingularDenominator(NumericalFailure):
    """The factor 1 − p·σ_z is (numerically) zero or |p·σ_z| ≥ 1."""


class CFLViolation(NumericalFailure):
    """Explicit time step exceeds the diffusive stability bound."""

    def __init__(self, dt: float, required_dt: float, time_index: int):
        self.dt = dt
        self.required_dt = required_dt
        self.time_index = time_index
        super().__init__(
            f"time step {dt:.6g} exceeds stability bound; required dt <= {required_dt:.6g} "
            f"(time level {time_index})"
        )


class PathExitError(NumericalFailure):
    """Too many simulated paths left the state box."""

    def __init__(self, fraction: float, cap: float):
        self.fraction = fraction
        self.cap = cap
        super().__init__(f"exit fraction {fraction:.4g} exceeds cap {cap:.4g}")


class PicardDivergence(NumericalFailure):
    """Forward-backward Picard sweeps grew for several consecutive sweeps."""


class RegressionRankDeficiency(NumericalFailure):
    """The regression basis is degenerate on the simulated sample."""


class NonFiniteOracle(FbControlError):
    """A coefficient or derivative oracle returned NaN or infinity."""


class NonLipschitzWarning(UserWarning):
    """Input data look non-Lipschitz on the grid; convergence orders are not asserted."""
