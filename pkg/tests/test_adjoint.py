"""Adjoint solvers: reductions, oracle agreement, smooth-case identities, export."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbcontrol.adjoint import (
    ADJOINT_HEADER,
    LOCAL_HEADER,
    read_adjoint_csv,
    read_local_csv,
    solve_first_adjoint,
    solve_local_adjoint,
    solve_second_adjoint,
    local_relation_n,
    write_adjoint_csv,
    write_local_csv,
)
from fbcontrol.algebra import k1
from fbcontrol.assumptions import solve_bound_odes
from fbcontrol.errors import SingularDenominator
from fbcontrol.fbsde import simulate_feedback, simulate_picard
from fbcontrol.hjb import solve_hjb
from instances import local_scenario, lq_scenario, simple_scenario
from oracles import regression_bsde


@pytest.fixture(scope="module")
def lq_run():
    sc = lq_scenario()
    f = solve_hjb(sc)
    b = simulate_feedback(sc, f)
    ode = solve_bound_odes(sc.coefficients.L1, sc.coefficients.L2, sc.beta0, sc.horizon)
    bound = max(ode.s[0], -ode.l[0])
    adj = solve_second_adjoint(sc, b, solve_first_adjoint(sc, b, bound=bound))
    return sc, f, b, adj


@pytest.fixture(scope="module")
def zcoupled_run():
    sc = local_scenario(sz=-0.05, paths=1000)
    f = solve_hjb(sc)
    b = simulate_feedback(sc, f)
    adj = solve_first_adjoint(sc, b)
    return sc, f, b, adj, solve_local_adjoint(sc, b)


def _decoupled_nonlinear():
    return simple_scenario(
        b={"cx": -0.5, "cu": 0.2},
        sigma={"c0": 0.25, "sin_x": 0.1},
        g={"sin_x": 1.0},
        phi={"cxx": 0.4, "sin_x": 0.2},
        time_steps=100,
        state_nodes=101,
        paths=2000,
    )


# --------------------------------------------------------------------------
# trivial reductions


def test_zero_driver_gives_constant_first_adjoint():
    sc = simple_scenario(b={"c0": 0.1, "cu": 1.0}, sigma={"c0": 0.3}, g={"cu": 1.0}, phi={"cx": 0.7}, paths=300)
    b = simulate_picard(sc, 0.0)
    adj = solve_first_adjoint(sc, b)
    assert np.allclose(adj.p, 0.7, atol=1e-12)
    assert np.allclose(adj.q, 0.0, atol=1e-12)


def test_zero_second_order_data_gives_zero_second_adjoint():
    sc = simple_scenario(b={"c0": 0.1}, sigma={"c0": 0.3}, g={"c0": 1.0}, phi={"cx": 0.0}, paths=300)
    b = simulate_picard(sc, 0.0)
    adj = solve_second_adjoint(sc, b, solve_first_adjoint(sc, b))
    assert np.allclose(adj.P, 0.0, atol=1e-14)
    assert np.allclose(adj.Q, 0.0, atol=1e-14)


def test_terminal_values_exact(lq_run):
    sc, _, b, adj = lq_run
    XT = b.X[:, -1]
    assert np.array_equal(adj.p[:, -1], sc.coefficients.phi.dx(XT))
    assert np.array_equal(adj.P[:, -1], sc.coefficients.phi.dxx(XT))


def test_shapes(lq_run):
    _, _, b, adj = lq_run
    M, N = b.dB.shape
    assert adj.p.shape == adj.P.shape == (M, N + 1)
    for arr in (adj.q, adj.Q, adj.K1, adj.K2):
        assert arr.shape == (M, N)


# --------------------------------------------------------------------------
# reduced-driver oracle (classical adjoints when y, z couplings vanish)


@pytest.fixture(scope="module")
def reduced_run():
    sc = _decoupled_nonlinear()
    b = simulate_picard(sc, 0.0)
    first = solve_first_adjoint(sc, b)
    return sc, b, solve_second_adjoint(sc, b, first)


class TestReducedOracle:
    @pytest.fixture
    def run(self, reduced_run):
        return reduced_run

    def test_first_order(self, run):
        sc, b, adj = run
        c = sc.coefficients
        X = b.X

        def driver(k, x, p, q):
            args = (b.t[k], x, 0.0, 0.0, 0.0)
            return c.g.jet(*args).dx + c.b.jet(*args).dx * p + c.sigma.jet(*args).dx * q

        p_o, q_o = regression_bsde(X, b.dB, b.t, c.phi.dx(X[:, -1]), driver, sc.montecarlo.basis_degree)
        assert np.max(np.abs(adj.p - p_o)) < sc.tolerances.regression
        assert np.max(np.abs(adj.q - q_o)) < sc.tolerances.regression

    def test_second_order(self, run):
        sc, b, adj = run
        c = sc.coefficients

        def driver(k, x, P, Q):
            args = (b.t[k], x, 0.0, 0.0, 0.0)
            bj, sj, gj = c.b.jet(*args), c.sigma.jet(*args), c.g.jet(*args)
            Hxx = gj.dxx + adj.p[:, k] * bj.dxx + adj.q[:, k] * sj.dxx
            return P * (sj.dx**2 + 2 * bj.dx) + 2 * Q * sj.dx + Hxx

        P_o, Q_o = regression_bsde(b.X, b.dB, b.t, c.phi.dxx(b.X[:, -1]), driver, sc.montecarlo.basis_degree)
        assert np.max(np.abs(adj.P - P_o)) < sc.tolerances.regression
        assert np.max(np.abs(adj.Q - Q_o)) < sc.tolerances.regression

    def test_k1_reduces_to_p_sigma_x_plus_q(self, run):
        sc, b, adj = run
        sx = sc.coefficients.sigma.jet(b.t[:-1], b.X[:, :-1], 0.0, 0.0, 0.0).dx
        assert np.allclose(adj.K1, adj.p[:, :-1] * sx + adj.q, rtol=0, atol=1e-14)


# --------------------------------------------------------------------------
# coupled LQ: smooth-case identities


def test_lq_first_adjoint_tracks_field_gradient(lq_run):
    _, f, b, adj = lq_run
    Wx = f.Wx_at(b.t[None, :] * np.ones_like(b.X), b.X)
    rel = np.median(np.abs(adj.p - Wx)) / np.mean(np.abs(Wx))
    assert rel < 0.05


def test_lq_second_adjoint_dominates_field_curvature(lq_run):
    sc, f, b, adj = lq_run
    tt = b.t[None, :] * np.ones_like(b.X)
    Wxx = f.Wxx_at(tt, b.X)
    tol = sc.tolerances.field + sc.tolerances.regression
    assert np.min(adj.P - Wxx) >= -tol


def test_lq_bound_on_p_respected(lq_run):
    _, _, _, adj = lq_run
    assert adj.diagnostics["bound_violation_fraction"] == 0.0
    assert adj.diagnostics["max_abs_p"] <= adj.diagnostics["bound"]


def test_lq_diagnostics_reported(lq_run):
    _, _, b, adj = lq_run
    d = adj.diagnostics
    assert len(d["fixed_point_iterations"]) == b.steps
    assert max(d["condition_numbers"]) < 1e12
    assert d["max_abs_q"] > 0


def test_k1_recomputed_from_stored_pq(zcoupled_run):
    sc, _, b, adj, _ = zcoupled_run
    c = sc.coefficients
    worst = 0.0
    for k in range(b.steps):
        jet = c.sigma.jet(b.t[k], b.X[:, k], b.Y[:, k], b.Z[:, k], b.u[:, k])
        worst = max(worst, float(np.max(np.abs(k1(jet, adj.p[:, k], adj.q[:, k]) - adj.K1[:, k]))))
    assert worst <= 1e-14


def test_deterministic(lq_run):
    sc, _, b, adj = lq_run
    again = solve_first_adjoint(sc, b)
    assert np.array_equal(again.p, adj.p) and np.array_equal(again.q, adj.q)


# --------------------------------------------------------------------------
# local adjoint


def test_local_zero_driver():
    sc = simple_scenario(b={"c0": 0.1, "cu": 1.0}, sigma={"c0": 0.3}, g={"cu": 1.0}, phi={"cx": -0.4}, paths=200)
    loc = solve_local_adjoint(sc, simulate_picard(sc, 0.0))
    assert np.all(loc.h == 1.0)
    assert np.allclose(loc.m, -0.4, atol=1e-12)
    assert np.allclose(loc.n, 0.0, atol=1e-12)


def test_local_reduces_to_classical_when_uncoupled():
    sc = _decoupled_nonlinear()
    b = simulate_picard(sc, 0.0)
    loc = solve_local_adjoint(sc, b)
    first = solve_first_adjoint(sc, b)
    assert np.all(loc.h == 1.0)
    assert np.max(np.abs(loc.m - first.p)) < sc.tolerances.regression


def test_local_initial_and_terminal_identities(zcoupled_run):
    sc, _, b, _, loc = zcoupled_run
    assert np.all(loc.h[:, 0] == 1.0)
    assert np.array_equal(loc.m[:, -1], sc.coefficients.phi.dx(b.X[:, -1]) * loc.h[:, -1])
    assert loc.diagnostics["min_h"] > 0


def test_local_m_equals_p_times_h(zcoupled_run):
    _, _, _, adj, loc = zcoupled_run
    ph = adj.p * loc.h
    assert np.median(np.abs(loc.m - ph)) / np.mean(np.abs(ph)) < 0.05


def test_local_h_matches_exponential(zcoupled_run):
    # b = −y gives dh = −m ds with m = h (W_x ≡ 1): h = e^{−s}
    _, _, b, _, loc = zcoupled_run
    assert np.max(np.abs(loc.h - np.exp(-b.t))) < 0.02


def test_local_n_matches_relation(zcoupled_run):
    sc, _, b, adj, loc = zcoupled_run
    c = sc.coefficients
    k = b.steps // 2
    args = (b.t[k], b.X[:, k], b.Y[:, k], b.Z[:, k], b.u[:, k])
    n = local_relation_n(c.b.jet(*args).dz, c.g.jet(*args).dz, c.sigma.jet(*args).dz, adj.p[:, k], adj.q[:, k], loc.h[:, k])
    assert np.median(np.abs(loc.n[:, k] - n)) < sc.tolerances.regression


# --------------------------------------------------------------------------
# local_relation_n


def test_relation_n_p_zero():
    assert local_relation_n(0.3, 0.2, 0.5, 0.0, 1.5, 2.0) == pytest.approx(3.0)


def test_relation_n_unit_h_no_sigma_z():
    p, q, bz, gz = 0.7, -0.2, 0.4, 1.1
    assert local_relation_n(bz, gz, 0.0, p, q, 1.0) == pytest.approx(bz * p * p + p * gz + q, abs=1e-15)


@given(
    bz=st.floats(-2, 2), gz=st.floats(-2, 2), sz=st.floats(-0.9, 0.9),
    p=st.floats(-1, 1), q=st.floats(-3, 3), h=st.floats(0.01, 3),
)
def test_relation_n_termwise(bz, gz, sz, p, q, h):
    numerator = bz * p * p
    numerator += p * gz
    numerator += q
    expected = numerator * h / (1.0 - p * sz)
    assert local_relation_n(bz, gz, sz, p, q, h) == pytest.approx(expected, rel=1e-12, abs=1e-12)


def test_relation_n_singular():
    with pytest.raises(SingularDenominator):
        local_relation_n(0.0, 0.0, 2.0, 0.5, 0.0, 1.0)


# --------------------------------------------------------------------------
# export


def test_adjoint_csv_round_trip(tmp_path, zcoupled_run):
    sc, _, b, adj, _ = zcoupled_run
    adj = solve_second_adjoint(sc, b, adj)
    path = tmp_path / "adj.csv"
    write_adjoint_csv(adj, path)
    assert path.read_text().splitlines()[0].split(",") == list(ADJOINT_HEADER)
    back = read_adjoint_csv(path)
    for name in ("t", "p", "q", "K1", "P", "Q", "K2"):
        assert np.array_equal(getattr(back, name), getattr(adj, name)), name


def test_first_only_csv_has_empty_second_columns(tmp_path):
    sc = simple_scenario(g={"cx": 1.0}, phi={"cx": 1.0}, paths=5, time_steps=4, state_nodes=11)
    adj = solve_first_adjoint(sc, simulate_picard(sc, 0.0))
    path = tmp_path / "a.csv"
    write_adjoint_csv(adj, path)
    assert read_adjoint_csv(path).P is None


def test_local_csv_round_trip(tmp_path, zcoupled_run):
    *_, loc = zcoupled_run
    path = tmp_path / "loc.csv"
    write_local_csv(loc, path)
    assert path.read_text().splitlines()[0].split(",") == list(LOCAL_HEADER)
    back = read_local_csv(path)
    for name in ("t", "h", "m", "n"):
        assert np.array_equal(getattr(back, name), getattr(loc, name)), name
