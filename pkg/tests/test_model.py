"""Model assembly: parameter validation, matrices, and the decomposition."""

import numpy as np
import pytest
from dataclasses import replace

from carbonfield import lqsolver as lq
from carbonfield.model import (
    DecompositionMismatch, E, InvalidParams, NTILDE, P, Q, S, STATE_DIM,
    ProducerParams, RegulatorPolicy, build_state_space, demand,
    production_decomposition,
)


class TestProducerParams:
    @pytest.mark.parametrize("overrides", [
        {"c1": 0.0}, {"c1": -1.0}, {"c3": 0.0}, {"rho0": -1.0},
        {"kappa1": 0.0}, {"kappa2": 0.0}, {"theta": 0.0},
        {"rho1": -0.1}, {"sigma0": -0.1}, {"sigma1": -0.1},
        {"delta": -0.1}, {"p2": -1.0},
        {"xbar0": [0.0, 0.0, 0.0]},
        {"var0": [0.0, -0.1, 0.0, 0.0, 0.0]},
        {"re_bounds": (-1.0, 5.0)}, {"re_bounds": (5.0, 1.0)},
    ])
    def test_invalid_rejected(self, small_params, overrides):
        with pytest.raises(InvalidParams):
            replace(small_params, **overrides)

    def test_arrays_coerced(self, small_params):
        assert small_params.xbar0.dtype == float
        assert small_params.xbar0.shape == (STATE_DIM,)


class TestRegulatorPolicy:
    def test_negative_rejected(self):
        with pytest.raises(InvalidParams):
            RegulatorPolicy(tau=-1.0, c2=10.0)
        with pytest.raises(InvalidParams):
            RegulatorPolicy(tau=1.0, c2=-10.0)

    def test_zero_allowed(self):
        RegulatorPolicy(tau=0.0, c2=0.0)


class TestDemand:
    def test_endpoints(self, small_params):
        # D(t) = base - amplitude cos(freq t): trough at t = 0, peak at the
        # half period
        assert demand(small_params, 0.0) == pytest.approx(45.0)
        half_period = np.pi / small_params.demand_frequency
        assert demand(small_params, half_period) == pytest.approx(55.0)

    def test_vectorized(self, small_params):
        t = np.linspace(0.0, 1.0, 7)
        d = demand(small_params, t)
        assert d.shape == (7,)
        assert np.allclose(d, [demand(small_params, ti) for ti in t])


class TestStateSpace:
    def test_matrix_entries(self, small_params, small_policy, small_grid):
        r_e = 3.0
        ss = build_state_space(small_params, small_policy, r_e, small_grid)
        p = small_params

        a_expect = np.zeros((5, 5))
        a_expect[Q, S] = -p.kappa2 * r_e
        a_expect[S, S] = -1.0
        a_expect[P, E] = 1.0
        assert np.array_equal(ss.A, a_expect)

        assert np.array_equal(ss.B, [p.kappa1, 0.0, p.delta, 0.0, 1.0])

        sigma_expect = np.zeros((5, 2))
        sigma_expect[Q, 0] = p.kappa2 * r_e * p.sigma0
        sigma_expect[S, 0] = p.sigma0
        sigma_expect[E, 1] = p.sigma1
        assert np.array_equal(ss.Sigma, sigma_expect)
        assert np.allclose(ss.a, 0.5 * sigma_expect @ sigma_expect.T)

        assert ss.F[Q, Q] == p.c3 * p.rho1 and np.count_nonzero(ss.F) == 1
        assert ss.G[Q, Q] == small_policy.c2 and np.count_nonzero(ss.G) == 1
        assert ss.S_T[P, P] == small_policy.tau and np.count_nonzero(ss.S_T) == 1
        assert ss.R == 2.0 * p.c1

    def test_affine_terms_at_zero(self, small_ss, small_params, small_policy):
        p = small_params
        c0 = small_ss.C(0.0)
        assert c0[Q] == pytest.approx(small_ss.r_e * p.kappa2 * (p.alpha + p.theta))
        assert c0[S] == p.theta
        assert np.count_nonzero(c0) == 2

        h0 = small_ss.H(0.0)
        d0 = demand(p, 0.0)
        assert h0[Q] == pytest.approx(
            -(2.0 * small_policy.c2 + p.c3 * p.rho1) * d0 - p.c3 * p.rho0)
        assert h0[NTILDE] == p.p1
        assert small_ss.J(0.0) == pytest.approx(small_policy.c2 * d0 ** 2)

    def test_affine_terms_vectorized(self, small_ss):
        t = np.linspace(0.0, 1.0, 5)
        assert small_ss.C(t).shape == (5, STATE_DIM)
        assert small_ss.H(t).shape == (5, STATE_DIM)
        assert small_ss.J(t).shape == (5,)
        for k, tk in enumerate(t):
            assert np.allclose(small_ss.C(t)[k], small_ss.C(tk))
            assert np.allclose(small_ss.H(t)[k], small_ss.H(tk))

    def test_re_out_of_bounds_rejected(self, small_params, small_policy,
                                       small_grid):
        with pytest.raises(InvalidParams):
            build_state_space(small_params, small_policy, 100.0, small_grid)
        with pytest.raises(InvalidParams):
            build_state_space(small_params, small_policy, -0.1, small_grid)


class TestProductionDecomposition:
    def _solved_xbar(self, small_params, small_policy, small_grid, r_e):
        ss = build_state_space(small_params, small_policy, r_e, small_grid)
        sol = lq.solve_mfc(ss)
        return sol.xbar

    def test_components_sum_to_total(self, small_params, small_policy,
                                     small_grid):
        xbar = self._solved_xbar(small_params, small_policy, small_grid, 3.0)
        renewable, nonrenewable, total = production_decomposition(
            xbar, small_params, 3.0, small_grid)
        assert np.allclose(renewable + nonrenewable, total, rtol=0, atol=1e-12)
        assert np.allclose(total, xbar[:, Q], rtol=1e-7, atol=1e-9)

    def test_zero_investment_has_no_renewable(self, small_params, small_policy,
                                              small_grid):
        xbar = self._solved_xbar(small_params, small_policy, small_grid, 0.0)
        renewable, _, _ = production_decomposition(
            xbar, small_params, 0.0, small_grid)
        assert np.array_equal(renewable, np.zeros(small_grid.n_nodes))

    def test_corrupted_trajectory_detected(self, small_params, small_policy,
                                           small_grid):
        xbar = self._solved_xbar(small_params, small_policy, small_grid, 3.0)
        bad = xbar.copy()
        bad[5:, Q] += 0.05 * (1.0 + np.abs(bad[:, Q]).max())
        with pytest.raises(DecompositionMismatch):
            production_decomposition(bad, small_params, 3.0, small_grid)

    def test_wrong_shape_rejected(self, small_params, small_grid):
        with pytest.raises(ValueError):
            production_decomposition(np.zeros((3, 5)), small_params, 0.0,
                                     small_grid)
