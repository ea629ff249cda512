"""Equilibrium search: scalar minimizer, fixed point, PoA bookkeeping."""

import numpy as np
import pytest

from carbonfield import equilibria, lqsolver as lq
from carbonfield.equilibria import (
    CONVERGED, MAX_ITER_REACHED, FixedPointConfig, SearchConfig, UndefinedPoA,
    _detect_oscillation, _minimize_scalar, nash_eq, poa_from_results,
    price_of_anarchy, social_opt, uncontrolled_mean_field,
)
from carbonfield.model import RegulatorPolicy
from dataclasses import replace


class TestConfigs:
    def test_fixed_point_validation(self):
        with pytest.raises(ValueError):
            FixedPointConfig(epsilon=0.0)
        with pytest.raises(ValueError):
            FixedPointConfig(damping=0.0)
        with pytest.raises(ValueError):
            FixedPointConfig(damping=1.5)
        with pytest.raises(ValueError):
            FixedPointConfig(max_iters=0)
        with pytest.raises(ValueError):
            FixedPointConfig(oscillation_window=1)

    def test_search_validation(self):
        with pytest.raises(ValueError):
            SearchConfig(coarse_points=1)
        with pytest.raises(ValueError):
            SearchConfig(refine_rel_width=0.0)
        with pytest.raises(ValueError):
            SearchConfig(refine_rel_width=1.0)


class TestMinimizeScalar:
    def test_interior_quadratic(self):
        cfg = SearchConfig(coarse_points=11, refine_rel_width=1e-6)
        x, v = _minimize_scalar(lambda x: (x - 3.1) ** 2, (0.0, 10.0), cfg)
        assert x == pytest.approx(3.1, abs=1e-4)
        assert v == pytest.approx(0.0, abs=1e-8)

    def test_boundary_minimum(self):
        cfg = SearchConfig(coarse_points=11, refine_rel_width=1e-4)
        x, v = _minimize_scalar(lambda x: x + 1.0, (0.0, 10.0), cfg)
        assert x == pytest.approx(0.0, abs=1e-2)
        assert v == pytest.approx(x + 1.0)

    def test_constant_ties_take_lowest(self):
        cfg = SearchConfig(coarse_points=5, refine_rel_width=1e-3)
        x, v = _minimize_scalar(lambda x: 7.0, (2.0, 6.0), cfg)
        assert x == 2.0 and v == 7.0

    def test_degenerate_bounds(self):
        cfg = SearchConfig()
        x, v = _minimize_scalar(lambda x: x * x, (4.0, 4.0), cfg)
        assert (x, v) == (4.0, 16.0)

    def test_returned_value_was_evaluated(self):
        seen = {}

        def f(x):
            seen[x] = np.cos(x) + 0.1 * x
            return seen[x]

        cfg = SearchConfig(coarse_points=9, refine_rel_width=1e-5)
        x, v = _minimize_scalar(f, (0.0, 10.0), cfg)
        assert x in seen and seen[x] == v
        assert v <= min(seen.values()) + 1e-15

    def test_deterministic(self):
        cfg = SearchConfig(coarse_points=9, refine_rel_width=1e-5)
        runs = {_minimize_scalar(lambda x: np.sin(x) + x * 0.2, (0.0, 8.0), cfg)
                for _ in range(3)}
        assert len(runs) == 1


class TestOscillation:
    def test_needs_full_window(self):
        assert not _detect_oscillation([1.0, 1.0, 1.0], window=6)

    def test_progress_not_flagged(self):
        residuals = [2.0 ** -k for k in range(10)]
        assert not _detect_oscillation(residuals, window=4)

    def test_stall_flagged(self):
        residuals = [1.0, 0.5, 0.3, 0.3, 0.3, 0.3, 0.3]
        assert _detect_oscillation(residuals, window=4)


class TestUncontrolled:
    def test_stationary_start_is_constant(self, small_params, small_grid):
        # zero control, zero investment and S(0) = theta: every component of
        # the uncontrolled mean is constant in time
        xbar = uncontrolled_mean_field(small_params, small_grid)
        expect = np.tile(small_params.xbar0, (small_grid.n_nodes, 1))
        assert np.allclose(xbar, expect, rtol=0, atol=1e-12)


class TestEquilibria:
    def test_social_opt_converges(self, small_params, small_policy, small_grid):
        eq = social_opt(small_params, small_policy, small_grid,
                        SearchConfig(coarse_points=5))
        assert eq.status == CONVERGED
        assert eq.kind == lq.MFC
        lo, hi = small_params.re_bounds
        assert lo <= eq.r_e_hat <= hi
        assert eq.cost_hat == eq.solution.analytic_cost

    def test_nash_converges_and_is_fixed_point(self, small_params,
                                               small_policy, small_grid):
        eq = nash_eq(small_params, small_policy, small_grid,
                     FixedPointConfig(), SearchConfig(coarse_points=5))
        assert eq.status == CONVERGED
        sol = eq.solution
        # the reported mean field reproduces itself under the best response
        from carbonfield.model import build_state_space
        ss = build_state_space(small_params, small_policy, eq.r_e_hat,
                               small_grid)
        xbar_resp = lq.solve_xbar(ss, sol.riccati, sol.r)
        scale = 1.0 + np.abs(sol.xbar).max()
        assert np.abs(xbar_resp - sol.xbar).max() / scale < 1e-5

    def test_max_iter_status(self, small_params, small_policy, small_grid):
        eq = nash_eq(small_params, small_policy, small_grid,
                     FixedPointConfig(max_iters=1, epsilon=1e-14),
                     SearchConfig(coarse_points=3))
        assert eq.status == MAX_ITER_REACHED
        assert np.isfinite(eq.cost_hat)

    def test_collapse_without_price_coupling(self, small_params, small_policy,
                                             small_grid):
        # rho1 = 0 removes the mean-field interaction: both notions coincide
        params = replace(small_params, rho1=0.0)
        cfg = SearchConfig(coarse_points=5)
        mfc = social_opt(params, small_policy, small_grid, cfg)
        mfg = nash_eq(params, small_policy, small_grid, FixedPointConfig(), cfg)
        assert mfc.status == CONVERGED and mfg.status == CONVERGED
        assert mfg.cost_hat == pytest.approx(mfc.cost_hat, rel=1e-9)
        assert poa_from_results(mfc, mfg) == pytest.approx(1.0, abs=1e-9)

    def test_poa_at_least_one(self, small_params, small_policy, small_grid):
        poa = price_of_anarchy(small_params, small_policy, small_grid,
                               FixedPointConfig(), SearchConfig(coarse_points=5))
        assert poa >= 1.0 - 1e-9


class TestPoABookkeeping:
    def _fake(self, status, cost):
        return equilibria.EquilibriumResult(
            kind=lq.MFC, r_e_hat=0.0, cost_hat=cost, solution=None,
            status=status, iterations=1)

    def test_non_converged_raises(self):
        good = self._fake(CONVERGED, 10.0)
        bad = self._fake(MAX_ITER_REACHED, 12.0)
        with pytest.raises(UndefinedPoA) as exc:
            poa_from_results(good, bad)
        assert exc.value.cost_mfg == 12.0

    def test_nonpositive_cooperative_cost_raises(self):
        with pytest.raises(UndefinedPoA):
            poa_from_results(self._fake(CONVERGED, -1.0),
                             self._fake(CONVERGED, 5.0))

    def test_ratio(self):
        assert poa_from_results(self._fake(CONVERGED, 8.0),
                                self._fake(CONVERGED, 10.0)) == 1.25
