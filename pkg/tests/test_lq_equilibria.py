import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from mfnash import lq_equilibria as lq
from mfnash.cost import verify_equilibrium
from mfnash.errors import OdeError, RiccatiBlowupError
from mfnash.mf_sde import TimeGrid

ODE_GRID = TimeGrid.from_dt(0.0, 1.0, 1e-3)
SIM_GRID = TimeGrid.from_dt(0.0, 1.0, 1e-2)
MV = lq.MVParams(0.05, 0.1, 0.2, 2.0, 1.0)
MV_SD = lq.MVParams(0.05, 0.1, 0.2, 2.0, 1.0, "inverse_state")
LQR = lq.LQRParams(0.2, 0.5, 0.3, 1.0, 1.0)


class TestRK4:
    def test_fourth_order(self):
        errs = []
        for n in (10, 20, 40):
            g = TimeGrid(0.0, 1.0, n)
            y = lq.rk4_solve(lambda s, y: -2 * s * y, 1.0, g)
            errs.append(abs(y[-1] - math.exp(-1)))
        assert 14 < errs[0] / errs[1] < 18 and 14 < errs[1] / errs[2] < 18

    def test_backward_keeps_terminal_exact(self):
        y = lq.rk4_solve(lambda s, y: np.array([y[1], -y[0]]), [0.3, 0.7], ODE_GRID,
                         terminal=True)
        assert np.array_equal(y[-1], [0.3, 0.7])
        assert y.shape == (1001, 2)

    def test_non_finite_field(self):
        with pytest.raises(OdeError):
            lq.rk4_solve(lambda s, y: np.nan * y, 1.0, ODE_GRID)


def test_params_validation():
    with pytest.raises(ValueError):
        lq.MVParams(0.05, 0.1, 0.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        lq.MVParams(0.05, 0.1, 0.2, -1.0, 1.0)
    with pytest.raises(ValueError):
        lq.MVParams(0.05, 0.1, 0.2, 1.0, 1.0, "other")
    with pytest.raises(ValueError):
        lq.LQRParams(0.1, 0.1, 0.1, 0.0, 1.0)


class TestMVConstant:
    def test_closed_form_agreement(self):
        eq = lq.solve_mv_constant(MV, ODE_GRID)
        s = ODE_GRID.points
        A, C, phi = oracles.mv_constant_coeffs(*[MV.r, MV.alpha, MV.sigma, MV.gamma, MV.T], s)
        assert np.max(np.abs(eq.A - A)) <= 1e-8
        assert np.max(np.abs(eq.C - C)) <= 1e-8
        assert np.max(np.abs(eq.phi(s, np.zeros_like(s)) - phi)) <= 1e-10
        assert eq.A[-1] == MV.gamma and eq.C[-1] == 1.0

    def test_phi_at_zero(self):
        eq = lq.solve_mv_constant(MV, ODE_GRID)
        A0 = 2 * math.exp(0.1)
        C0 = math.exp(0.05)
        expect = 0.05 / 0.04 * C0 / A0
        assert eq.phi.value(0.0, 1.0) == pytest.approx(expect, abs=1e-10)
        assert expect == pytest.approx(0.05 / (2 * 0.04) * math.exp(-0.05), rel=1e-14)
        assert eq.phi.value(1.0, 1.0) == pytest.approx(0.05 / (2 * 0.04), rel=1e-14)

    def test_zero_rate(self):
        p = lq.MVParams(0.0, 0.1, 0.2, 2.0, 1.0)
        eq = lq.solve_mv_constant(p, ODE_GRID)
        assert np.all(eq.A == 2.0) and np.all(eq.C == 1.0)
        assert np.allclose(eq.feedback_gain(ODE_GRID.points), 0.1 / (2 * 0.04), rtol=1e-15)

    @given(g=st.floats(0.1, 10))
    @settings(max_examples=20, deadline=None)
    def test_doubling_gamma_halves_phi(self, g):
        a = lq.solve_mv_constant(lq.MVParams(0.05, 0.1, 0.2, g, 1.0), TimeGrid(0.0, 1.0, 50))
        b = lq.solve_mv_constant(lq.MVParams(0.05, 0.1, 0.2, 2 * g, 1.0), TimeGrid(0.0, 1.0, 50))
        s = a.grid.points
        assert np.allclose(b.feedback_gain(s), a.feedback_gain(s) / 2, rtol=1e-13)

    def test_spike_limit_formula(self):
        eq = lq.solve_mv_constant(MV, ODE_GRID)
        for t, v in [(0.0, -1.0), (0.37, 2.0), (0.9, 0.61)]:
            u = eq.phi.value(t, 1.0)
            assert eq.spike_limit(t, 1.0, v) == pytest.approx(
                oracles.mv_spike_limit(MV.r, MV.sigma, MV.gamma, MV.T, t, v, u), rel=1e-10)
        assert eq.P(0.3) == pytest.approx(-MV.gamma * math.exp(2 * MV.r * 0.7))


class TestMVStateDependent:
    def test_closed_form_agreement(self):
        eq = lq.solve_mv_state_dep(MV_SD, ODE_GRID)
        A, C = oracles.mv_state_dep_coeffs(MV.r, MV.alpha, MV.sigma, MV.gamma, MV.T,
                                           ODE_GRID.points)
        assert np.max(np.abs(eq.A - A)) <= 1e-8 and np.max(np.abs(eq.C - C)) <= 1e-8
        cf = eq.closed_form
        assert np.max(np.abs(eq.A - cf["A"](ODE_GRID.points))) <= 1e-8

    def test_phi_two_ways(self):
        eq = lq.solve_mv_state_dep(MV_SD, ODE_GRID)
        A, C = oracles.mv_state_dep_coeffs(MV.r, MV.alpha, MV.sigma, MV.gamma, MV.T, 0.0)
        expect = (MV.alpha - MV.r) / (MV.gamma * MV.sigma ** 2) * C / A
        assert eq.phi.value(0.0, 1.0) == pytest.approx(expect, abs=1e-8)
        assert eq.phi.value(0.0, 3.0) == pytest.approx(3 * expect, abs=1e-8)

    def test_terminal_and_zero_excess(self):
        eq = lq.solve_mv_state_dep(MV_SD, ODE_GRID)
        assert eq.A[-1] == 1.0 and eq.C[-1] == 1.0
        assert eq.phi.value(1.0, 2.0) == pytest.approx(0.05 / 0.08 * 2.0, rel=1e-14)
        p = lq.MVParams(0.05, 0.05, 0.2, 2.0, 1.0, "inverse_state")
        eq0 = lq.solve_mv_state_dep(p, ODE_GRID)
        assert np.max(np.abs(eq0.A - np.exp(0.1 * (1 - ODE_GRID.points)))) <= 1e-8
        assert np.all(eq0.feedback_gain(ODE_GRID.points) == 0.0)

    def test_zero_rate_limit(self):
        p = lq.MVParams(0.0, 0.1, 0.2, 2.0, 1.0, "inverse_state")
        eq = lq.solve_mv_state_dep(p, ODE_GRID)
        tau = 1 - ODE_GRID.points
        limit = 1 + 0.01 / (2 * 0.04) * tau
        assert np.max(np.abs(eq.A - limit)) <= 1e-12
        assert np.max(np.abs(eq.closed_form["A"](ODE_GRID.points) - limit)) <= 1e-15
        tiny = lq.MVParams(1e-9, 0.1, 0.2, 2.0, 1.0, "inverse_state")
        assert np.max(np.abs(lq.mv_state_dep_closed_form(tiny)["A"](ODE_GRID.points) - limit)) < 1e-7

    def test_spike_limit_formula(self):
        eq = lq.solve_mv_state_dep(MV_SD, ODE_GRID)
        t, x, v = 0.3, 2.0, 1.5
        u = eq.phi.value(t, x)
        expect = -0.5 * (MV.gamma / x) * math.exp(2 * MV.r * (MV.T - t)) * MV.sigma ** 2 * (v - u) ** 2
        assert eq.spike_limit(t, x, v) == pytest.approx(expect, rel=1e-9)

    def test_cost_needs_positive_state(self):
        _, cost = lq.mv_model(MV_SD)
        with pytest.raises(ValueError):
            cost(0.0, -1.0)


class TestLQR:
    def test_vw_vs_direct_riccati(self):
        eq = lq.solve_lqr(LQR, ODE_GRID)
        ric = lq.solve_lqr_riccati_direct(LQR, ODE_GRID)
        assert np.max(np.abs(eq.A - ric)) <= 1e-7
        assert np.max(np.abs(eq.C - LQR.gamma * np.exp(LQR.a * (1 - ODE_GRID.points)))) <= 1e-12

    def test_no_drift_gives_stationary_solution(self):
        eq = lq.solve_lqr(lq.LQRParams(0.0, 0.5, 0.3, 1.0, 1.0), ODE_GRID)
        assert np.all(eq.A == 1.0) and np.all(eq.C == 1.0)
        assert np.all(eq.feedback_gain(ODE_GRID.points) == 0.0)

    def test_no_control_authority(self):
        eq = lq.solve_lqr(lq.LQRParams(0.3, 0.0, 0.3, 1.5, 1.0), ODE_GRID)
        assert np.max(np.abs(eq.A - 1.5 * np.exp(0.6 * (1 - ODE_GRID.points)))) <= 1e-10
        assert np.all(eq.feedback_gain(ODE_GRID.points) == 0.0)

    def test_feedback_identity(self):
        eq = lq.solve_lqr(LQR, ODE_GRID)
        s = ODE_GRID.points
        y = np.full_like(s, 1.7)
        assert np.allclose(eq.phi(s, y) / y, LQR.b * (eq.C - eq.A), rtol=0, atol=1e-15)

    def test_blowup_guard(self):
        with pytest.raises(RiccatiBlowupError) as info:
            lq.solve_lqr(LQR, ODE_GRID, w_floor=2.0)
        assert 0.0 <= info.value.s <= 1.0

    def test_spike_limit_is_half_square(self):
        eq = lq.solve_lqr(LQR, ODE_GRID)
        u = eq.phi.value(0.4, 1.2)
        assert eq.spike_limit(0.4, 1.2, u + 0.8) == pytest.approx(-0.32, abs=1e-12)

    def test_json_roundtrip(self):
        eq = lq.solve_lqr(LQR, TimeGrid(0.0, 1.0, 10))
        d = json.loads(json.dumps(eq.to_dict()))
        assert d["family"] == "lqr" and len(d["alpha"]) == 11 and d["params"]["a"] == 0.2


class TestAdjointResidual:
    @pytest.mark.parametrize("eq", [lq.solve_mv_constant(MV, ODE_GRID),
                                    lq.solve_mv_state_dep(MV_SD, ODE_GRID),
                                    lq.solve_lqr(LQR, ODE_GRID)], ids=lambda e: e.family)
    def test_passes(self, eq):
        rep = lq.adjoint_residual_check(eq, SIM_GRID, 20000, 7)
        assert rep.passed
        assert rep.first_order_violation <= 1e-12

    def test_mv_drift_residual_within_se(self):
        eq = lq.solve_mv_constant(MV, ODE_GRID)
        rep = lq.adjoint_residual_check(eq, SIM_GRID, 20000, 7, check_tol=0.0)
        assert rep.passed

    def test_lqr_no_drift_foc(self):
        eq = lq.solve_lqr(lq.LQRParams(0.0, 0.5, 0.3, 1.0, 1.0), ODE_GRID)
        p, q, _ = eq.adjoint_at(0.3, 1.4)
        assert p == 0.0 and q == pytest.approx(-0.3)
        assert eq.first_order_violation(0.3, 1.4) == 0.0

    def test_noise_free_residual_is_first_order(self):
        eq = lq.solve_lqr(lq.LQRParams(0.2, 0.5, 0.0, 1.0, 1.0), ODE_GRID)
        res = []
        for dt in (0.02, 0.01, 0.005):
            rep = lq.adjoint_residual_check(eq, TimeGrid.from_dt(0, 1, dt), 2, 0)
            assert rep.drift_residual_se == 0.0
            res.append(rep.drift_residual)
        assert 1.6 < res[0] / res[1] < 2.4 and 1.6 < res[1] / res[2] < 2.4

    def test_wrong_coefficients_fail(self):
        eq = lq.solve_mv_constant(MV, ODE_GRID)
        # a constant rescaling of C would still solve its linear ODE; change the decay rate
        wrong_C = eq.C * np.exp(2.0 * (1.0 - ODE_GRID.points))
        bad = lq.LQEquilibrium(eq.family, eq.params, eq.grid, eq.A, wrong_C, eq.closed_form)
        assert not lq.adjoint_residual_check(bad, SIM_GRID, 5000, 7).passed


@pytest.mark.parametrize("family", ["mv_constant", "mv_state_dep", "lqr"])
def test_equilibrium_handoff_default_sweep(family):
    eq = {"mv_constant": lambda: lq.solve_mv_constant(MV, ODE_GRID),
          "mv_state_dep": lambda: lq.solve_mv_state_dep(MV_SD, ODE_GRID),
          "lqr": lambda: lq.solve_lqr(LQR, ODE_GRID)}[family]()
    dyn, cost = eq.model()
    # the regulator's feedback is state-dependent, so index windows carry an
    # O(dt) first-order term (see test_lqr_spike_bias_is_first_order_in_dt);
    # at dt = 0.005 it sits below the Monte Carlo error
    grid = TimeGrid.from_dt(0.0, 1.0, 0.005) if family == "lqr" else SIM_GRID
    for t in (0.0, 0.3, 0.6):
        for x in (0.5, 1.0, 2.0):
            u = eq.phi.value(t, x)
            chk = verify_equilibrium(dyn, cost, eq.phi, t, x, [u + d for d in (-1, -0.5, 0.5, 1)],
                                     [0.08, 0.04, 0.02, 0.01], grid, 100000, 42,
                                     equilibrium=eq)
            assert chk.passed, (t, x)
            for r in chk.reports:
                assert abs(r.extrapolated_limit - r.analytic_limit) <= 3 * r.extrapolated_std_error


def test_lqr_spike_bias_is_first_order_in_dt():
    # half the difference of the +nu and -nu limits isolates the term linear in nu
    eq = lq.solve_lqr(LQR, ODE_GRID)
    dyn, cost = eq.model()
    u = eq.phi.value(0.0, 2.0)
    odd = {}
    for dt in (0.01, 0.005):
        chk = verify_equilibrium(dyn, cost, eq.phi, 0.0, 2.0, [u + 1.0, u - 1.0],
                                 [0.08, 0.04, 0.02, 0.01], TimeGrid.from_dt(0.0, 1.0, dt), 100000,
                                 42, equilibrium=eq)
        hi, lo = chk.reports
        odd[dt] = (0.5 * (hi.extrapolated_limit - lo.extrapolated_limit), hi.extrapolated_std_error)
    assert odd[0.01][0] > 3 * odd[0.01][1]
    assert odd[0.01][0] > 1.5 * abs(odd[0.005][0])
