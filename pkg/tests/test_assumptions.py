from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fbcontrol.assumptions import (
    BoundOdeSolution,
    F_eval,
    check_assumption3,
    check_monotonicity,
    classify_regime,
    lambda_beta,
    solve_bound_odes,
)
from fbcontrol.problem import SampleBox, affine_family

finite = dict(allow_nan=False, allow_infinity=False)


class TestF:
    def test_at_zero(self):
        assert F_eval(0.0, 1.3, 0.7, 0.4) == 1.3

    @given(y=st.floats(-50, 50, **finite), L1=st.floats(0, 5, **finite))
    def test_reduces_without_L2(self, y, L1):
        assert F_eval(y, L1, 0.0, 0.3) == pytest.approx(L1 * (1 + abs(y)), rel=1e-14, abs=1e-300)

    @given(y=st.floats(-50, 50, **finite), L1=st.floats(0, 5), L2=st.floats(0, 5), b0=st.floats(0.01, 0.99))
    def test_even(self, y, L1, L2, b0):
        assert F_eval(-y, L1, L2, b0) == F_eval(y, L1, L2, b0)

    def test_full_polynomial(self):
        L1, L2, b0, y = 0.5, 0.25, 0.5, -2.0
        want = L1 + (L2 + L1 + L1 * L2 / b0) * 2 + (L2 + (L1 * L2 + L2**2) / b0) * 4 + L2**2 / b0 * 8
        assert F_eval(y, L1, L2, b0) == pytest.approx(want, rel=1e-15)


class TestBoundOdes:
    def closed(self, L1, T, t):
        return (1 + L1) * np.exp(L1 * (T - t)) - 1

    def test_closed_form_linear_case(self):
        ode = solve_bound_odes(1.0, 0.0, 0.5, 1.0, 1000)
        assert np.max(np.abs(ode.s - self.closed(1.0, 1.0, ode.t))) <= 1e-8
        assert ode.s[-1] == 1.0 and ode.l[-1] == -1.0
        assert ode.t_star == -math.inf and not ode.blowup

    def test_rk4_fourth_order(self):
        errs = []
        for n in (20, 40, 80):
            ode = solve_bound_odes(2.0, 0.0, 0.5, 1.0, n)
            errs.append(np.max(np.abs(ode.s - self.closed(2.0, 1.0, ode.t))))
        orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
        assert all(3.8 < o < 4.2 for o in orders), orders

    def test_zero_constants(self):
        ode = solve_bound_odes(0.0, 0.0, 0.5, 1.0, 50)
        assert np.all(ode.s == 0.0) and np.all(ode.l == 0.0)

    @given(L1=st.floats(0.01, 2), L2=st.floats(0, 0.3), b0=st.floats(0.2, 0.9))
    def test_symmetry_and_monotonicity(self, L1, L2, b0):
        ode = solve_bound_odes(L1, L2, b0, 0.5, 200)
        fin = np.isfinite(ode.s) & np.isfinite(ode.l)
        assert np.max(np.abs(ode.l[fin] + ode.s[fin]), initial=0.0) <= 1e-12 * (1 + np.max(np.abs(ode.s[fin])))
        assert np.all(ode.s[fin] >= L1)

    def test_blowup_matches_threshold(self):
        ode = solve_bound_odes(1.0, 0.5, 0.5, 1.0, 4000)
        assert ode.blowup
        assert ode.t2 == pytest.approx(ode.t1, abs=1e-10)
        assert ode.blowup_time == pytest.approx(ode.t2, abs=2e-3)
        assert ode.t_star > 0


class TestAssumption3:
    def test_L3_zero(self):
        ode = solve_bound_odes(1.0, 0.0, 0.4, 1.0, 100)
        v = check_assumption3(ode, 0.0, 0.4)
        assert v.passed and v.margin == pytest.approx(0.6)

    def test_margin_exactly_zero_passes(self):
        ode = BoundOdeSolution(np.array([0, 1.0]), np.array([2.0, 1.0]), np.array([-2.0, -1.0]), False, None, -math.inf, -math.inf, -math.inf, 1.0, 0.0, 0.5, 1.0)
        v = check_assumption3(ode, 0.25, 0.5)
        assert v.margin == 0.0 and v.passed

    def test_threshold_from_closed_form(self):
        ode = solve_bound_odes(1.0, 0.0, 0.5, 1.0, 1000)
        thr = 0.5 / (2 * math.e - 1)
        assert check_assumption3(ode, thr * (1 - 1e-6), 0.5).passed
        assert not check_assumption3(ode, thr * (1 + 1e-6), 0.5).passed

    @given(L1=st.floats(0, 2), L3=st.floats(0, 2), b0=st.floats(0.05, 0.95))
    def test_verdict_is_direct_evaluation(self, L1, L3, b0):
        ode = solve_bound_odes(L1, 0.0, b0, 1.0, 100)
        v = check_assumption3(ode, L3, b0)
        direct = max(ode.s[0], -ode.l[0]) * L3 <= 1 - b0 and ode.t_star < 0
        assert v.passed == direct


class TestLambda:
    def test_zero_coupling(self):
        rep = lambda_beta({b: 5.0 for b in range(2, 9)}, 0.0, 0.0, 1.0)
        assert all(v == 0.0 for v in rep.values.values())
        assert all(rep.passed.values())

    def test_arithmetic(self):
        rep = lambda_beta({2: 1.0}, 0.5, 0.1, 1.0)
        assert rep.values[2] == 4.0 and rep.passed[2] is False
        assert rep.values[3] is None and rep.passed[3] is None

    @given(c1=st.floats(0, 2), c2=st.floats(0, 2))
    def test_monotone_in_c1(self, c1, c2):
        lo, hi = sorted((c1, c2))
        C = {b: 0.3 for b in range(2, 9)}
        a, b = lambda_beta(C, lo, 0.0, 1.0), lambda_beta(C, 0.0, hi, 1.0)
        assert all(a.values[k] <= b.values[k] for k in range(2, 9))


class TestMonotonicity:
    def test_dissipative_family(self):
        c = affine_family(b={"cy": -1.0}, g={"cx": 1.0}, phi={"cx": 1.0})
        res = check_monotonicity(c, 1000, seed=0)
        assert res.passed and res.beta == (1.0, 0.0, 1.0)

    def test_sign_flipped_fails_with_witness(self):
        c = affine_family(b={"cy": 1.0}, g={"cx": -1.0}, phi={"cx": 1.0})
        res = check_monotonicity(c, 500, seed=0)
        assert not res.passed and res.witness is not None and res.witness["value"] > 0

    @staticmethod
    def dense_oracle(k1, k2, k3, kphi):
        """Lexicographic fit over a dense lattice of difference directions."""
        ang = np.linspace(0, np.pi, 181)
        th, ph = np.meshgrid(ang, ang)
        dx, dy, dz = np.cos(th), np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph)
        lhs = -(k1 * dx**2 + k2 * dy**2 + k3 * dz**2)
        m = dx**2 > 1e-12
        b1 = np.min(-lhs[m] / dx[m] ** 2)
        rest = -lhs - b1 * dx**2
        c = dy**2 + dz**2
        m = c > 1e-12
        b2 = max(0.0, np.min(rest[m] / c[m]))
        return b1, b2, kphi

    @given(
        k1=st.floats(0.2, 3), k2=st.floats(0.0, 2), k3=st.floats(0.0, 2), kphi=st.floats(0.1, 3), seed=st.integers(0, 50)
    )
    def test_matches_dense_grid_oracle(self, k1, k2, k3, kphi, seed):
        # b = −k2 y, σ = −k3 z, g = k1 x, φ = kphi x: ⟨ΔΠ,δ⟩ = −k1δx² − k2δy² − k3δz².
        c = affine_family(b={"cy": -k2}, sigma={"cz": -k3}, g={"cx": k1}, phi={"cx": kphi})
        res = check_monotonicity(c, 300, seed)
        o1, o2, o3 = self.dense_oracle(k1, k2, k3, kphi)
        # Finite samples impose fewer constraints than the dense lattice.
        slack = 0.02 * max(k2, k3) + 1e-3
        assert o1 - 1e-3 <= res.beta[0] <= o1 + slack
        assert 0.0 <= res.beta[1] <= o2 + slack + 1e-2
        assert res.beta[2] == pytest.approx(o3, abs=1e-3)
        assert res.passed

    def test_adding_samples_never_rescues_failure(self):
        c = affine_family(b={"cy": -1.0, "sin_x": 0.8}, g={"cx": 0.5}, phi={"cx": 1.0})
        few = check_monotonicity(c, 50, seed=3)
        many = check_monotonicity(c, 500, seed=3)
        assert many.beta[0] <= few.beta[0] + 1e-12
        if not few.passed:
            assert not many.passed


class TestRegime:
    def test_linear_sigma(self):
        rep = classify_regime(affine_family(sigma={"cz": 0.3, "cx": 1.0}))
        assert rep.regime == "linear_sigma"
        assert np.allclose(rep.a_tilde, 0.3, atol=1e-12)

    def test_general(self):
        assert classify_regime(affine_family(sigma={"sin_z": 1.0})).regime == "general"

    def test_local_convex_flag(self):
        rep = classify_regime(affine_family(g={"cuu": 1.0}), convex_flag=True, box=SampleBox(u=(-1.0, 1.0)))
        assert "local_convex" in rep.flags
