"""Producer-level equilibrium search.

Cooperative side: a 1-D minimization of the planner cost over the renewable
investment level (coarse scan plus golden-section refinement; the cost need
not be convex in the investment, which enters the dynamics and noise
quadratically through the Riccati solution).

Competitive side: damped Picard iteration on the population mean field. Each
iteration best-responds with a fresh investment search against the frozen
mean field, then relaxes the mean field toward the best response. Genuine
non-convergence exists for mid-range policies; it is reported as a status,
never raised.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import lqsolver as lq
from .model import ProducerParams, RegulatorPolicy, StateSpace, build_state_space
from .numkernel import TimeGrid

CONVERGED = "converged"
MAX_ITER_REACHED = "max_iter_reached"
OSCILLATING = "oscillating"

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


class UndefinedPoA(Exception):
    """Price of anarchy is meaningless: a run failed to converge or the
    cooperative cost is nonpositive. Carries both raw costs."""

    def __init__(self, message: str, cost_mfc: float | None = None,
                 cost_mfg: float | None = None):
        super().__init__(message)
        self.cost_mfc = cost_mfc
        self.cost_mfg = cost_mfg


@dataclass(frozen=True)
class FixedPointConfig:
    """Knobs of the competitive mean-field iteration."""

    epsilon: float | None = None     # None: 1e-6 * (1 + sup-norm of the start)
    max_iters: int = 200
    damping: float = 0.5
    oscillation_window: int = 6

    def __post_init__(self):
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must be in (0, 1]")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.oscillation_window < 2:
            raise ValueError("oscillation_window must be >= 2")


@dataclass(frozen=True)
class SearchConfig:
    """Knobs of the 1-D investment search."""

    coarse_points: int = 41
    refine_rel_width: float = 1e-3   # final bracket width / bounds range

    def __post_init__(self):
        if self.coarse_points < 2:
            raise ValueError("coarse_points must be >= 2")
        if not (0 < self.refine_rel_width < 1):
            raise ValueError("refine_rel_width must be in (0, 1)")


@dataclass
class EquilibriumResult:
    kind: str                       # lq.MFG or lq.MFC
    r_e_hat: float
    cost_hat: float
    solution: lq.MeanFieldSolution
    status: str
    iterations: int
    accepted: bool | None = None    # walk-away flag, filled by the regulator layer
    final_residual: float = np.nan  # last mean-field sup-change (MFG only)


def optim_mfc_n(
    params: ProducerParams,
    policy: RegulatorPolicy,
    r_e: float,
    grid: TimeGrid,
) -> tuple[float, lq.MeanFieldSolution]:
    """Planner cost and solution at a fixed investment level."""
    ss = build_state_space(params, policy, r_e, grid)
    sol = lq.solve_mfc(ss)
    return sol.analytic_cost, sol


def optim_mfg_n(
    params: ProducerParams,
    policy: RegulatorPolicy,
    r_e: float,
    xbar_fixed: np.ndarray,
    grid: TimeGrid,
) -> float:
    """Best-response cost against a frozen mean field (not recomputed)."""
    cost, _ = _mfg_best_response(params, policy, r_e, xbar_fixed, grid, cache=None)
    return cost


def _mfg_best_response(params, policy, r_e, xbar_fixed, grid, cache):
    """Cost plus the (ss, riccati, r) triple behind it; riccati cached by r_e."""
    if cache is not None and r_e in cache:
        ss, riccati = cache[r_e]
    else:
        ss = build_state_space(params, policy, r_e, grid)
        riccati = lq.solve_riccati(ss)
        if cache is not None:
            cache[r_e] = (ss, riccati)
    r = lq.solve_r_mfg(ss, riccati, xbar_fixed)
    s0 = lq.compute_s0(ss, riccati, r)
    sol = lq.MeanFieldSolution(
        kind=lq.MFG, riccati=riccati, r=r, xbar=np.asarray(xbar_fixed), s0=s0,
        analytic_cost=np.nan, r_e=r_e, policy=policy, grid=grid, params=params,
    )
    cost = lq.analytic_cost(sol, params)
    return cost, (ss, riccati, r, s0)


def _minimize_scalar(
    objective: Callable[[float], float],
    bounds: tuple[float, float],
    cfg: SearchConfig,
) -> tuple[float, float]:
    """Coarse grid scan plus golden-section refinement; lowest-argument ties.

    Returns (argmin, min value). Deterministic for a deterministic objective.
    """
    lo, hi = bounds
    if hi == lo:
        return lo, objective(lo)
    candidates = np.linspace(lo, hi, cfg.coarse_points)
    values = np.array([objective(c) for c in candidates])
    best = int(np.argmin(values))  # argmin takes the first (lowest) index on ties

    left = candidates[max(best - 1, 0)]
    right = candidates[min(best + 1, cfg.coarse_points - 1)]
    target_width = cfg.refine_rel_width * (hi - lo)

    a, b = left, right
    x1 = b - GOLDEN * (b - a)
    x2 = a + GOLDEN * (b - a)
    f1, f2 = objective(x1), objective(x2)
    while (b - a) > target_width:
        if f1 <= f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - GOLDEN * (b - a)
            f1 = objective(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + GOLDEN * (b - a)
            f2 = objective(x2)
    # keep the best point actually evaluated, bracket ends included
    finals = [(candidates[best], values[best]), (x1, f1), (x2, f2)]
    finals.sort(key=lambda p: (p[1], p[0]))
    return finals[0]


def social_opt(
    params: ProducerParams,
    policy: RegulatorPolicy,
    grid: TimeGrid,
    search_cfg: SearchConfig = SearchConfig(),
) -> EquilibriumResult:
    """Minimize the planner cost over the admissible investment range."""
    cache: dict[float, tuple[float, lq.MeanFieldSolution]] = {}

    def objective(r_e: float) -> float:
        if r_e not in cache:
            cache[r_e] = optim_mfc_n(params, policy, r_e, grid)
        return cache[r_e][0]

    r_e_hat, cost_hat = _minimize_scalar(objective, params.re_bounds, search_cfg)
    _, solution = cache[r_e_hat]
    return EquilibriumResult(
        kind=lq.MFC, r_e_hat=r_e_hat, cost_hat=cost_hat, solution=solution,
        status=CONVERGED, iterations=1,
    )


def uncontrolled_mean_field(params: ProducerParams, grid: TimeGrid) -> np.ndarray:
    """Mean trajectory with zero fuel control and zero renewable investment.

    Deterministic, parameter-free starting point of the competitive
    iteration.
    """
    policy = RegulatorPolicy(tau=0.0, c2=0.0)
    ss = build_state_space(params, policy, 0.0, grid)
    zero_eta = lq.RiccatiSolution(
        eta=np.zeros((grid.n_nodes, 5, 5)), min_eigenvalue_0=0.0
    )
    zero_r = np.zeros((grid.n_nodes, 5))
    return lq.solve_xbar(ss, zero_eta, zero_r)


def _detect_oscillation(residuals: list[float], window: int) -> bool:
    """No sup-norm progress over the trailing window."""
    if len(residuals) <= window:
        return False
    recent = residuals[-window:]
    return recent[-1] >= residuals[-window - 1] * (1.0 - 1e-12)


def nash_eq(
    params: ProducerParams,
    policy: RegulatorPolicy,
    grid: TimeGrid,
    fp_cfg: FixedPointConfig = FixedPointConfig(),
    search_cfg: SearchConfig = SearchConfig(),
) -> EquilibriumResult:
    """Damped Picard iteration to a competitive mean-field equilibrium.

    Non-convergence (iteration cap or detected stall/oscillation, after one
    automatic retry at half damping) is reported through ``status``.
    """
    result = _nash_eq_once(params, policy, grid, fp_cfg, search_cfg)
    if result.status == OSCILLATING and fp_cfg.damping > 0.25:
        retry_cfg = replace(fp_cfg, damping=fp_cfg.damping / 2.0)
        retry = _nash_eq_once(params, policy, grid, retry_cfg, search_cfg)
        retry.iterations += result.iterations
        return retry
    return result


def _nash_eq_once(params, policy, grid, fp_cfg, search_cfg) -> EquilibriumResult:
    xbar = uncontrolled_mean_field(params, grid)
    epsilon = fp_cfg.epsilon
    if epsilon is None:
        epsilon = 1e-6 * (1.0 + float(np.max(np.linalg.norm(xbar, axis=1))))

    riccati_cache: dict[float, tuple] = {}
    residuals: list[float] = []
    status = MAX_ITER_REACHED
    best = None
    iterations = 0

    for iterations in range(1, fp_cfg.max_iters + 1):
        response_cache: dict[float, tuple] = {}

        def objective(r_e: float) -> float:
            if r_e not in response_cache:
                response_cache[r_e] = _mfg_best_response(
                    params, policy, r_e, xbar, grid, riccati_cache
                )
            return response_cache[r_e][0]

        r_e_hat, cost_hat = _minimize_scalar(objective, params.re_bounds, search_cfg)
        cost_hat, (ss, riccati, r, s0) = response_cache[r_e_hat]
        best = (r_e_hat, cost_hat, ss, riccati, r, s0)

        xbar_response = lq.solve_xbar(ss, riccati, r)
        xbar_new = (1.0 - fp_cfg.damping) * xbar + fp_cfg.damping * xbar_response
        residual = float(np.max(np.linalg.norm(xbar_new - xbar, axis=1)))
        residuals.append(residual)
        xbar = xbar_new

        if residual <= epsilon:
            status = CONVERGED
            break
        if _detect_oscillation(residuals, fp_cfg.oscillation_window):
            status = OSCILLATING
            break

    r_e_hat, cost_hat, ss, riccati, r, s0 = best
    solution = lq.MeanFieldSolution(
        kind=lq.MFG, riccati=riccati, r=r, xbar=xbar, s0=s0,
        analytic_cost=cost_hat, r_e=r_e_hat, policy=policy, grid=grid,
        params=params,
    )
    return EquilibriumResult(
        kind=lq.MFG, r_e_hat=r_e_hat, cost_hat=cost_hat, solution=solution,
        status=status, iterations=iterations, final_residual=residuals[-1],
    )


def price_of_anarchy(
    params: ProducerParams,
    policy: RegulatorPolicy,
    grid: TimeGrid,
    fp_cfg: FixedPointConfig = FixedPointConfig(),
    search_cfg: SearchConfig = SearchConfig(),
) -> float:
    """Competitive over cooperative equilibrium cost at one policy."""
    mfc = social_opt(params, policy, grid, search_cfg)
    mfg = nash_eq(params, policy, grid, fp_cfg, search_cfg)
    return poa_from_results(mfc, mfg)


def poa_from_results(mfc: EquilibriumResult, mfg: EquilibriumResult) -> float:
    if mfc.status != CONVERGED or mfg.status != CONVERGED:
        raise UndefinedPoA(
            f"non-converged run (mfc: {mfc.status}, mfg: {mfg.status})",
            cost_mfc=mfc.cost_hat, cost_mfg=mfg.cost_hat,
        )
    if mfc.cost_hat <= 0:
        raise UndefinedPoA(
            f"cooperative cost {mfc.cost_hat:g} is nonpositive; ratio meaningless",
            cost_mfc=mfc.cost_hat, cost_mfg=mfg.cost_hat,
        )
    return mfg.cost_hat / mfc.cost_hat
