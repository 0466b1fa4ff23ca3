"""Relation checks: trivial cases, negative controls, report plumbing."""

from __future__ import annotations

import json

import numpy as np
import pytest

from fbcontrol.adjoint import solve_first_adjoint, solve_local_adjoint, solve_second_adjoint
from fbcontrol.algebra import hamiltonian_H1
from fbcontrol.fbsde import simulate_feedback, simulate_picard
from fbcontrol.hjb import solve_hjb
from fbcontrol.problem import ControlSet, MonteCarlo, VerifySettings, affine_family
from fbcontrol.verify import (
    INEQUALITY,
    RESIDUAL,
    check_dpp,
    check_jet_spatial,
    check_jet_temporal,
    check_k_relations,
    check_local_relations,
    check_mp_global,
    check_mp_local,
    check_smooth_relations,
    check_verification_theorem,
    decide,
    probe_sub_jet,
    reports_to_json,
    reports_to_table,
    run_verification,
    select_samples,
)
from instances import local_scenario, lq_scenario, simple_scenario


def as_local(sc):
    pts = sc.controls.points
    return sc.replace(controls=ControlSet(pts, convex=True), regime="local_convex")


def pipeline(sc, local=False):
    f = solve_hjb(sc)
    b = simulate_feedback(sc, f)
    adj = solve_second_adjoint(sc, b, solve_first_adjoint(sc, b))
    loc = solve_local_adjoint(sc, b) if local else None
    return f, b, adj, loc


@pytest.fixture(scope="module")
def lq_small():
    sc = lq_scenario(paths=1000)
    return (sc, *pipeline(sc))


@pytest.fixture(scope="module")
def zero_quadratic():
    sc = simple_scenario(phi={"cxx": 1.0, "cx": 0.2}, sigma={"c0": 0.0}, time_steps=50, state_nodes=81, paths=64)
    return (sc, *pipeline(sc))


# --------------------------------------------------------------------------
# verdict plumbing


@pytest.mark.parametrize(
    "kind, stat, thr, expected",
    [
        (INEQUALITY, -0.01, 0.02, True),
        (INEQUALITY, -0.03, 0.02, False),
        (INEQUALITY, 0.0, 0.0, True),
        (RESIDUAL, 0.01, 0.02, True),
        (RESIDUAL, 0.03, 0.02, False),
        (RESIDUAL, float("nan"), 1.0, False),
    ],
)
def test_decide(kind, stat, thr, expected):
    assert decide(kind, stat, thr) is expected


def test_samples_are_interior_and_sized(lq_small):
    sc, _, b, _, _ = lq_small
    smp = select_samples(sc, b)
    assert len(smp.paths) == 32 and len(smp.times) == 8
    assert smp.times.min() > 0 and smp.times.max() < b.steps


def test_every_sample_has_coordinates(lq_small):
    sc, _, b, adj, _ = lq_small
    rep = check_mp_global(sc, b, adj)
    assert len(rep.coords) == rep.values.size == 32 * 8 * 9
    c = rep.coords[5]
    assert {"path", "time_index", "t", "control"} <= set(c)
    assert rep.passed == decide(rep.kind, rep.statistic, rep.threshold)


# --------------------------------------------------------------------------
# MP_GLOBAL


def test_mp_global_singleton_margins_zero():
    sc = lq_scenario(paths=300).replace(controls=ControlSet((0.0,)))
    f, b, adj, _ = pipeline(sc)
    rep = check_mp_global(sc, b, adj)
    assert np.all(rep.values == 0.0) and rep.passed


def test_mp_global_lq_passes(lq_small):
    sc, _, b, adj, _ = lq_small
    rep = check_mp_global(sc, b, adj)
    assert rep.passed
    assert rep.tolerance["total"] == pytest.approx(sc.tolerances.field + sc.tolerances.regression)


def test_mp_global_detects_suboptimal_control(lq_small):
    sc, _, _, _, _ = lq_small
    b = simulate_picard(sc, 1.0)
    adj = solve_second_adjoint(sc, b, solve_first_adjoint(sc, b))
    rep = check_mp_global(sc, b, adj)
    assert not rep.passed
    assert rep.statistic < -0.5
    assert rep.details["worst"]["control"] == 0.0


def test_mp_global_invariant_to_terminal_constant():
    base = lq_scenario(paths=300)
    shifted = lq_scenario(paths=300).replace(
        coefficients=affine_family(
            b={"cx": -0.2, "cz": 0.1, "cu": 0.1}, sigma={"c0": 0.3, "cu": 0.1},
            g={"cx": 0.1, "cy": 0.2, "cz": 0.2, "cu": 1.0}, phi={"cxx": 0.2, "cx": 0.1, "c0": 0.5},
            state_box=(-3.0, 3.0),
        )
    )
    r = []
    for sc in (base, shifted):
        b = simulate_picard(sc, 1.0)
        adj = solve_second_adjoint(sc, b, solve_first_adjoint(sc, b))
        r.append(check_mp_global(sc, b, adj).values)
    # W and Y shift with the constant, but p, q, P and the 𝓗-differences do not
    assert np.allclose(r[0], r[1], atol=1e-10)


# --------------------------------------------------------------------------
# MP_LOCAL


def test_mp_local_u_independent_gives_zero_margins():
    sc = as_local(simple_scenario(b={"cy": -1.0}, sigma={"c0": 0.3}, g={"cx": 1.0}, phi={"cx": 1.0},
                                  controls=(-1.0, 0.0, 1.0), paths=100))
    f, b, adj, loc = pipeline(sc, local=True)
    rep = check_mp_local(sc, b, loc)
    assert np.all(rep.values == 0.0) and rep.passed


def test_mp_local_interior_optimum_gradient_vanishes():
    sc = local_scenario(paths=300)
    f, b, adj, loc = pipeline(sc, local=True)
    rep = check_mp_local(sc, b, loc)
    assert rep.passed
    assert abs(rep.details["gradient_median"]) < 1e-3


def test_mp_local_boundary_optimum_points_inward():
    sc = local_scenario(b4=2.0, paths=300)
    f, b, adj, loc = pipeline(sc, local=True)
    assert np.all(b.u == -1.0)
    rep = check_mp_local(sc, b, loc)
    u = np.array([c["control"] for c in rep.coords])
    assert np.all(rep.values[u > -1.0] > 0.05)


# --------------------------------------------------------------------------
# jet probes


def test_spatial_jet_quadratic_zero_dynamics(zero_quadratic):
    sc, f, b, adj, _ = zero_quadratic
    rep = check_jet_spatial(sc, f, b, adj)
    assert rep.passed
    assert max(abs(e) for e in rep.details["envelope"]) < 1e-9


def test_spatial_jet_enlarged_curvature_still_passes(lq_small):
    sc, f, b, adj, _ = lq_small
    ip, ik = select_samples(sc, b).grid()
    rep = check_jet_spatial(sc, f, b, adj, P_override=adj.P[ip, ik] + 1.0)
    assert rep.passed


def test_spatial_jet_lq_envelope(lq_small):
    sc, f, b, adj, _ = lq_small
    rep = check_jet_spatial(sc, f, b, adj)
    assert rep.passed
    assert rep.details["envelope_monotone_to_floor"]
    assert len(rep.details["deltas"]) == 4


@pytest.mark.parametrize("shift", [0.1, -0.1])
def test_sub_jet_detects_wrong_gradient(lq_small, shift):
    sc, f, b, adj, _ = lq_small
    ip, ik = select_samples(sc, b).grid()
    flags = probe_sub_jet(sc, f, b, adj.p[ip, ik] + shift, adj.P[ip, ik] - 1.0)
    assert flags.all()


def test_sub_jet_accepts_true_gradient_with_lower_curvature(lq_small):
    sc, f, b, adj, _ = lq_small
    ip, ik = select_samples(sc, b).grid()
    assert not probe_sub_jet(sc, f, b, adj.p[ip, ik], adj.P[ip, ik] - 1.0).any()


def test_spatial_probe_outside_box_rejected(lq_small):
    sc, f, b, adj, _ = lq_small
    with pytest.raises(ValueError):
        check_jet_spatial(sc, f, b, adj, delta0=10.0)


def test_temporal_jet_unit_cost_residual_zero():
    sc = simple_scenario(g={"c0": 1.0}, phi={"cxx": 0.5}, time_steps=80, state_nodes=41, paths=64)
    f, b, adj, _ = pipeline(sc)
    rep = check_jet_temporal(sc, f, b, adj)
    assert rep.passed
    assert max(rep.details["envelope"]) < 1e-9


def test_temporal_generator_without_drift_or_cost():
    # b = g = 0 with constant σ: 𝓗₁ reduces to −qσ + Pσ²
    sc = simple_scenario(sigma={"c0": 0.3}, phi={"cxx": 0.5}, paths=2000)
    c = sc.coefficients
    p, q, P = np.array([0.4, -0.2]), np.array([0.1, 0.3]), np.array([0.5, 2.0])
    val = hamiltonian_H1(c, (0.3, np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2)), p, q, P)
    assert np.allclose(val, -q * 0.3 + P * 0.09, atol=1e-15)
    f, b, adj, _ = pipeline(sc)
    assert check_jet_temporal(sc, f, b, adj).passed


def test_temporal_jet_lq(lq_small):
    sc, f, b, adj, _ = lq_small
    rep = check_jet_temporal(sc, f, b, adj)
    assert rep.passed and rep.details["envelope_monotone_to_floor"]


# --------------------------------------------------------------------------
# smooth-case identities


def test_smooth_relations_zero_problem_exact(zero_quadratic):
    sc, f, b, adj, _ = zero_quadratic
    reps = check_smooth_relations(sc, f, b, adj)
    assert reps["SMOOTH_PQ"].passed and reps["SMOOTH_P2"].passed
    assert reps["SMOOTH_PQ"].details["p_median"] < 1e-10
    assert reps["SMOOTH_PQ"].details["q_median"] < 1e-12


def test_smooth_relations_lq(lq_small):
    sc, f, b, adj, _ = lq_small
    reps = check_smooth_relations(sc, f, b, adj)
    assert reps["SMOOTH_PQ"].passed and reps["SMOOTH_P2"].passed


def test_k_relations_decoupled_closed_form():
    sc = simple_scenario(b={"cx": -0.3}, sigma={"c0": 0.3, "sin_x": 0.1}, g={"cx": 1.0},
                         phi={"cxx": 0.5}, time_steps=100, state_nodes=101, paths=400)
    f, b, adj, _ = pipeline(sc)
    reps = check_k_relations(sc, f, b, adj)
    # with σ_z = 0 the closed form is W_xσ_x + W_xxσ, compared with the finite difference
    assert reps["K1_VX"].details["closed_form_median"] < 1e-3
    assert reps["K1_VX"].passed


def test_k_relations_zero_dynamics(zero_quadratic):
    sc, f, b, adj, _ = zero_quadratic
    reps = check_k_relations(sc, f, b, adj)
    assert reps["K1_VX"].statistic < 1e-14 and reps["K2_VXX"].statistic < 1e-12
    assert reps["K1_VX"].passed and reps["K2_VXX"].passed


# --------------------------------------------------------------------------
# verification theorem and DPP


def test_verification_singleton():
    sc = lq_scenario(paths=500).replace(controls=ControlSet((0.0,)), verify=VerifySettings(random_maps=0))
    f, b, _, _ = pipeline(sc)
    rep = check_verification_theorem(sc, f, b)
    assert rep.passed
    costs = rep.details["costs"]
    assert costs["constant:0"]["J"] == pytest.approx(costs["feedback"]["J"], abs=1e-3)


def test_verification_dominated_control_has_positive_margin():
    sc = simple_scenario(b={"cx": -0.2}, sigma={"c0": 0.3}, g={"cx": 0.5, "cu": 1.0}, phi={"cxx": 0.2},
                         controls=(0.0, 1.0), time_steps=100, state_nodes=101, paths=500,
                         ).replace(verify=VerifySettings(random_maps=1))
    f, b, _, _ = pipeline(sc)
    rep = check_verification_theorem(sc, f, b)
    assert rep.passed
    assert rep.details["costs"]["constant:1"]["gap"] > 0.5


def test_dpp_check_passes_on_lq(lq_small):
    sc, f, b, _, _ = lq_small
    assert check_dpp(sc, f, b).passed


def test_jet_checks_gated_by_dpp(lq_small):
    sc, f, b, adj, _ = lq_small
    wrong = solve_hjb(lq_scenario(k1=0.6))  # a field that does not decouple this bundle
    reps = run_verification(sc, wrong, b, adj, relations=("DPP_CONSISTENCY", "JET_SPACE", "JET_TIME"))
    assert reps["DPP_CONSISTENCY"].passed is False
    assert reps["JET_SPACE"].passed is False and "DPP" in reps["JET_SPACE"].note
    assert reps["JET_TIME"].passed is False


def test_local_relations_zero_driver():
    sc = simple_scenario(sigma={"c0": 0.3}, g={"cu": 1.0}, phi={"cx": 0.6}, paths=64)
    f, b, adj, loc = pipeline(sc, local=True)
    rep = check_local_relations(sc, b, adj, loc)
    assert rep.statistic < 1e-12 and rep.passed


def test_local_relations_instance():
    sc = local_scenario(paths=300)
    f, b, adj, loc = pipeline(sc, local=True)
    rep = check_local_relations(sc, b, adj, loc)
    assert rep.passed and rep.details["relative_median"] < 0.05


# --------------------------------------------------------------------------
# pipeline and output


def test_pipeline_skips_local_relations_outside_local_regime(lq_small):
    sc, f, b, adj, _ = lq_small
    reps = run_verification(sc, f, b, adj, relations=("MP_LOCAL", "LOCAL_MH", "MP_GLOBAL"))
    assert list(reps) == ["MP_GLOBAL", "MP_LOCAL", "LOCAL_MH"]
    assert reps["MP_LOCAL"].passed is None and reps["LOCAL_MH"].passed is None


def test_json_and_table(lq_small):
    sc, f, b, adj, _ = lq_small
    reps = run_verification(sc, f, b, adj, relations=("MP_GLOBAL", "SMOOTH_PQ"))
    doc = json.loads(reports_to_json(reps))
    assert doc["passed"] is True
    assert [r["relation"] for r in doc["relations"]] == ["MP_GLOBAL", "SMOOTH_PQ"]
    first = doc["relations"][0]["samples"][0]
    assert {"path", "time_index", "t", "control", "value"} <= set(first)
    table = reports_to_table(reps).splitlines()
    assert table[0].split()[:3] == ["relation", "kind", "verdict"]
    assert "PASS" in table[1]


def test_reports_reproducible(lq_small):
    sc, f, b, adj, _ = lq_small
    a = reports_to_json(run_verification(sc, f, b, adj, relations=("MP_GLOBAL", "JET_SPACE")))
    c = reports_to_json(run_verification(sc, f, b, adj, relations=("MP_GLOBAL", "JET_SPACE")))
    assert a == c


def test_verification_theorem_uses_mc_settings():
    sc = lq_scenario(paths=300).replace(
        controls=ControlSet((0.0,)), montecarlo=MonteCarlo(paths=300, seed=5, steps=50, basis_degree=2),
        verify=VerifySettings(random_maps=0),
    )
    f, b, _, _ = pipeline(sc)
    rep = check_verification_theorem(sc, f, b)
    assert len(rep.coords) == 2
