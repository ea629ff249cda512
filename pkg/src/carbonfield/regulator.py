"""Regulator's side of the Stackelberg game.

Given a producer equilibrium at each (tau, c2) pair on announced grids, the
regulator evaluates its five-term cost, discards cells where the producers
walk away from the contract (or where the competitive iteration failed to
converge), and picks the cheapest accepted policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import equilibria, lqsolver as lq
from .model import P, Q, ProducerParams, RegulatorPolicy, demand
from .numkernel import TimeGrid, trapezoid

STACKELBERG_MFC = "stackelberg_mfc"
STACKELBERG_MFG = "stackelberg_mfg"

ACCEPTED = "accepted"
REJECTED = "rejected"
NOT_CONVERGED = "not_converged"


class AllRejected(Exception):
    """Every policy cell was rejected or failed; no argmin exists."""


@dataclass(frozen=True)
class RegulatorParams:
    """Cost weights, pollution target, and the announced policy grids.

    The initial mean pollution level is read off the producer initial state
    rather than configured separately, keeping the two models consistent.
    """

    alpha1: float               # pollution-target overshoot weight
    alpha2: float               # tax revenue weight
    alpha3: float               # tax burden weight
    alpha4: float               # demand mismatch weight
    alpha5: float               # penalty burden weight
    pbar_target: float          # terminal mean pollution target
    walkaway_threshold: float   # producer cost ceiling for contract acceptance
    tau_grid: tuple[float, ...]
    c2_grid: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "tau_grid", tuple(float(v) for v in self.tau_grid))
        object.__setattr__(self, "c2_grid", tuple(float(v) for v in self.c2_grid))
        for name in ("alpha1", "alpha2", "alpha3", "alpha4", "alpha5"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        for name, grid in (("tau_grid", self.tau_grid), ("c2_grid", self.c2_grid)):
            if len(grid) == 0:
                raise ValueError(f"{name} must be nonempty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly increasing")


@dataclass(frozen=True)
class PolicyCell:
    """One evaluated grid cell of the Stackelberg table."""

    policy: RegulatorPolicy
    producer: equilibria.EquilibriumResult
    status: str                 # ACCEPTED / REJECTED / NOT_CONVERGED
    cost: float                 # regulator cost J; +inf when not accepted

    @property
    def accepted(self) -> bool:
        return self.status == ACCEPTED


@dataclass(frozen=True)
class StackelbergResult:
    kind: str                   # STACKELBERG_MFC or STACKELBERG_MFG
    table: tuple[PolicyCell, ...]
    policy_hat: RegulatorPolicy
    j_hat: float
    producer_at_optimum: equilibria.EquilibriumResult


def regulator_cost(
    reg: RegulatorParams,
    policy: RegulatorPolicy,
    sol: lq.MeanFieldSolution,
    grid: TimeGrid,
) -> float:
    """Five-term regulator cost of a solved producer mean field.

    J = alpha1 (Pbar_T - target)_+ - alpha2 tau (Pbar_T - Pbar_0)
        + alpha3 tau^2 + int alpha4 |Qbar_t - D_t|^2 dt + alpha5 c2^2.
    """
    if sol.params is None:
        raise ValueError("solution carries no producer parameters")
    pbar_t = float(sol.xbar[-1, P])
    pbar_0 = float(sol.xbar[0, P])
    mismatch = sol.xbar[:, Q] - demand(sol.params, grid.times)
    return (
        reg.alpha1 * max(pbar_t - reg.pbar_target, 0.0)
        - reg.alpha2 * policy.tau * (pbar_t - pbar_0)
        + reg.alpha3 * policy.tau ** 2
        + reg.alpha4 * float(trapezoid(mismatch * mismatch, grid))
        + reg.alpha5 * policy.c2 ** 2
    )


def accept_contract(producer_cost: float, converged: bool, reg: RegulatorParams) -> bool:
    """Strictly-below-threshold acceptance; non-converged runs never accept."""
    return bool(converged and np.isfinite(producer_cost)
                and producer_cost < reg.walkaway_threshold)


def evaluate_cell(
    params: ProducerParams,
    reg: RegulatorParams,
    grid: TimeGrid,
    kind: str,
    policy: RegulatorPolicy,
    fp_cfg: equilibria.FixedPointConfig = equilibria.FixedPointConfig(),
    search_cfg: equilibria.SearchConfig = equilibria.SearchConfig(),
) -> PolicyCell:
    """Solve one (tau, c2) cell and apply the walk-away rule."""
    if kind == STACKELBERG_MFC:
        producer = equilibria.social_opt(params, policy, grid, search_cfg)
    else:
        producer = equilibria.nash_eq(params, policy, grid, fp_cfg, search_cfg)

    converged = producer.status == equilibria.CONVERGED
    accepted = accept_contract(producer.cost_hat, converged, reg)
    producer.accepted = accepted
    if accepted:
        status = ACCEPTED
        cost = regulator_cost(reg, policy, producer.solution, grid)
    else:
        status = REJECTED if converged else NOT_CONVERGED
        cost = np.inf
    return PolicyCell(policy=policy, producer=producer, status=status, cost=cost)


def stackelberg_eq(
    params: ProducerParams,
    reg: RegulatorParams,
    grid: TimeGrid,
    kind: str,
    fp_cfg: equilibria.FixedPointConfig = equilibria.FixedPointConfig(),
    search_cfg: equilibria.SearchConfig = equilibria.SearchConfig(),
    cells: tuple[PolicyCell, ...] | None = None,
) -> StackelbergResult:
    """Grid search over (tau, c2) with the chosen producer model underneath.

    Rejected and non-converged cells carry J = +inf and can never be the
    argmin; ties are broken by smaller tau, then smaller c2 (the grids are
    increasing, so row-major iteration order realizes that rule). A
    pre-computed ``cells`` table (e.g. filled concurrently, in grid order)
    may be supplied; only the deterministic argmin reduction runs then.
    """
    if kind not in (STACKELBERG_MFC, STACKELBERG_MFG):
        raise ValueError(f"unknown Stackelberg kind: {kind!r}")

    if cells is None:
        cells = tuple(
            evaluate_cell(params, reg, grid, kind,
                          RegulatorPolicy(tau=tau, c2=c2), fp_cfg, search_cfg)
            for tau in reg.tau_grid for c2 in reg.c2_grid
        )

    best = None
    for cell in cells:
        if cell.accepted and np.isfinite(cell.cost) \
                and (best is None or cell.cost < best.cost):
            best = cell
    if best is None:
        raise AllRejected("every (tau, c2) cell was rejected or non-converged")
    return StackelbergResult(
        kind=kind, table=tuple(cells), policy_hat=best.policy,
        j_hat=best.cost, producer_at_optimum=best.producer,
    )
