"""LQ solver: Riccati oracles, stencil exactness, cost assembly.

Independent oracles used here:
* a scalar Riccati problem with a tanh closed form, embedded in the 5-state
  system so only one entry is active;
* fixed-step RK4 (from numkernel) as a second integrator for the full matrix
  Riccati equation;
* a damped Picard iteration for the cooperative coupled (r, xbar) system,
  written out in this file against the one-shot sparse solve.
"""

import numpy as np
import pytest

from carbonfield import lqsolver as lq
from carbonfield.model import (
    NTILDE, P, Q, STATE_DIM, StateSpace, build_state_space,
)
from carbonfield.numkernel import TimeGrid, rk4_backward


def scalar_riccati_ss(small_params, small_policy, grid, g=1.0, s_t=0.5, R=2.0):
    """System whose Riccati equation is scalar: d(eta)/dt = eta^2/R - 2g."""
    zero = np.zeros((STATE_DIM, STATE_DIM))
    b = np.zeros(STATE_DIM)
    b[Q] = 1.0
    g_mat = zero.copy()
    g_mat[Q, Q] = g
    s_mat = zero.copy()
    s_mat[Q, Q] = s_t
    return StateSpace(
        A=zero.copy(), B=b, Sigma=np.zeros((STATE_DIM, 2)), a=zero.copy(),
        F=zero.copy(), G=g_mat, S_T=s_mat, R=R, grid=grid, r_e=0.0,
        params=small_params, policy=small_policy,
    )


class TestRiccati:
    def test_scalar_closed_form(self, small_params, small_policy):
        # with g = 1, R = 2, eta_T = 1:  eta(t) = 2 tanh(T - t + atanh(1/2))
        grid = TimeGrid(horizon=3.0, n_steps=60)
        ss = scalar_riccati_ss(small_params, small_policy, grid)
        sol = lq.solve_riccati(ss)
        exact = 2.0 * np.tanh(grid.horizon - grid.times + np.arctanh(0.5))
        assert np.max(np.abs(sol.eta[:, Q, Q] - exact)) < 1e-8
        off = sol.eta.copy()
        off[:, Q, Q] = 0.0
        assert np.max(np.abs(off)) < 1e-10

    def test_matches_rk4_oracle(self, small_ss):
        ss = small_ss
        sol = lq.solve_riccati(ss)
        s_ctl = np.outer(ss.B, ss.B) / ss.R

        def field(t, eta):
            return eta @ s_ctl @ eta - ss.A.T @ eta - eta @ ss.A - 2.0 * ss.G

        fine = ss.grid.refined(8)
        oracle = rk4_backward(2.0 * ss.S_T, field, fine)[::8]
        scale = 1.0 + np.abs(oracle).max()
        assert np.max(np.abs(sol.eta - oracle)) / scale < 1e-7

    def test_terminal_pinned_and_symmetric(self, small_ss):
        sol = lq.solve_riccati(small_ss)
        assert np.array_equal(sol.eta[-1], 2.0 * small_ss.S_T)
        assert np.allclose(sol.eta, np.transpose(sol.eta, (0, 2, 1)),
                           rtol=0, atol=0)

    def test_psd_at_all_nodes(self, small_ss):
        sol = lq.solve_riccati(small_ss)
        eigs = np.linalg.eigvalsh(sol.eta)
        scale = 1.0 + np.abs(sol.eta).max()
        assert eigs.min() >= -1e-8 * scale

    def test_grid_refinement_stability(self, small_params, small_policy):
        coarse = build_state_space(small_params, small_policy, 3.0,
                                   TimeGrid(1.0, 40))
        fine = build_state_space(small_params, small_policy, 3.0,
                                 TimeGrid(1.0, 80))
        eta_c = lq.solve_riccati(coarse).eta
        eta_f = lq.solve_riccati(fine).eta[::2]
        scale = 1.0 + np.abs(eta_f).max()
        assert np.max(np.abs(eta_c - eta_f)) / scale < 1e-6


class TestSweeps:
    def test_mfg_stencils_exact(self, small_ss):
        riccati = lq.solve_riccati(small_ss)
        xbar0 = np.tile(small_ss.params.xbar0, (small_ss.grid.n_nodes, 1))
        r = lq.solve_r_mfg(small_ss, riccati, xbar0)
        assert np.array_equal(r[-1], np.zeros(STATE_DIM))
        xbar = lq.solve_xbar(small_ss, riccati, r)
        assert np.array_equal(xbar[0], small_ss.params.xbar0)
        # discrete solutions satisfy their stencils to round-off
        assert lq.r_stencil_residual(small_ss, riccati, r, xbar0, lq.MFG) < 1e-10
        assert lq.xbar_stencil_residual(small_ss, riccati, r, xbar) < 1e-10

    def test_corrupted_solution_fails_stencil(self, small_ss):
        riccati = lq.solve_riccati(small_ss)
        xbar0 = np.tile(small_ss.params.xbar0, (small_ss.grid.n_nodes, 1))
        r = lq.solve_r_mfg(small_ss, riccati, xbar0)
        bad = r.copy()
        bad[10] *= 1.01
        assert lq.r_stencil_residual(small_ss, riccati, bad, xbar0, lq.MFG) > 1e-6


class TestCoupledMFC:
    def picard_oracle(self, ss, riccati, damping=0.5, tol=1e-13,
                      max_iters=500):
        """Independent alternating-sweep iteration for the coupled system."""
        kernel = lq._StepKernel(ss, riccati)
        f_sym = ss.F + ss.F.T
        base = kernel.etaC + kernel.h_nodes
        xbar = np.tile(ss.params.xbar0, (ss.grid.n_nodes, 1))
        r = np.zeros_like(xbar)
        for _ in range(max_iters):
            r_new = kernel.sweep_r(base + xbar @ f_sym.T)
            xbar_new = kernel.sweep_xbar(r_new, ss.params.xbar0)
            r_next = (1 - damping) * r + damping * r_new
            xbar_next = (1 - damping) * xbar + damping * xbar_new
            change = max(np.abs(r_next - r).max(), np.abs(xbar_next - xbar).max())
            scale = 1.0 + max(np.abs(r_next).max(), np.abs(xbar_next).max())
            r, xbar = r_next, xbar_next
            if change < tol * scale:
                return r, xbar
        raise AssertionError("Picard oracle did not converge")

    def test_one_shot_matches_picard(self, small_ss):
        riccati = lq.solve_riccati(small_ss)
        r, xbar = lq.solve_coupled_mfc(small_ss, riccati)
        r_o, xbar_o = self.picard_oracle(small_ss, riccati)
        scale = 1.0 + max(np.abs(r_o).max(), np.abs(xbar_o).max())
        assert np.abs(r - r_o).max() / scale < 1e-8
        assert np.abs(xbar - xbar_o).max() / scale < 1e-8

    def test_stencils_exact(self, small_ss):
        riccati = lq.solve_riccati(small_ss)
        r, xbar = lq.solve_coupled_mfc(small_ss, riccati)
        assert lq.r_stencil_residual(small_ss, riccati, r, xbar, lq.MFC) < 1e-10
        assert lq.xbar_stencil_residual(small_ss, riccati, r, xbar) < 1e-10
        assert np.array_equal(r[-1], np.zeros(STATE_DIM))
        assert np.array_equal(xbar[0], small_ss.params.xbar0)


class TestCostAssembly:
    def test_s0_reduces_to_offset_quadrature(self, small_params, small_policy):
        # no noise, r = 0, zero investment: only the running offset J remains
        grid = TimeGrid(horizon=1.0, n_steps=10)
        ss = scalar_riccati_ss(small_params, small_policy, grid)
        zero_riccati = lq.RiccatiSolution(
            eta=np.zeros((grid.n_nodes, STATE_DIM, STATE_DIM)),
            min_eigenvalue_0=0.0)
        r = np.zeros((grid.n_nodes, STATE_DIM))
        s0 = lq.compute_s0(ss, zero_riccati, r)
        expect = np.trapezoid(ss.J(grid.times), dx=grid.dt)
        assert s0 == pytest.approx(expect, rel=1e-12)

    def test_s0_hand_quadrature(self, small_ss):
        riccati = lq.solve_riccati(small_ss)
        r, _ = lq.solve_coupled_mfc(small_ss, riccati)
        ss = small_ss
        t = ss.grid.times
        br = r @ ss.B
        integrand = (
            np.einsum("ij,kji->k", ss.a, riccati.eta)
            - br ** 2 / (2.0 * ss.R)
            + np.einsum("ki,ki->k", ss.C(t), r)
            + ss.J(t)
        )
        expect = ss.params.p2 * ss.r_e + np.trapezoid(integrand, dx=ss.grid.dt)
        assert lq.compute_s0(ss, riccati, r) == pytest.approx(expect, rel=1e-12)

    def test_solve_mfc_cost_is_finite_and_consistent(self, small_ss):
        sol = lq.solve_mfc(small_ss)
        assert sol.kind == lq.MFC
        assert np.isfinite(sol.analytic_cost)
        recomputed = lq.analytic_cost(sol, small_ss.params)
        assert recomputed == sol.analytic_cost


class TestControls:
    def test_feedback_matches_mean_control(self, small_ss):
        sol = lq.solve_mfc(small_ss)
        nbar = lq.mean_control(small_ss, sol.riccati, sol.r, sol.xbar)
        for k in (0, 7, small_ss.grid.n_steps):
            t = small_ss.grid.times[k]
            direct = lq.feedback_control(small_ss, sol.riccati, sol.r,
                                         sol.xbar[k], t)
            assert direct == pytest.approx(nbar[k], rel=1e-12)

    def test_off_node_time_rejected(self, small_ss):
        sol = lq.solve_mfc(small_ss)
        with pytest.raises(ValueError):
            lq.feedback_control(small_ss, sol.riccati, sol.r,
                                sol.xbar[0], 0.5 * small_ss.grid.dt)
