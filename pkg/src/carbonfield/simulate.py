"""Monte Carlo simulation of the controlled producer SDEs.

Verifies the analytic solutions independently: empirical versus analytic
cost, sample versus analytic mean field, equilibrium certificates by random
deviations with common random numbers, and the costate consistency of the
ansatz Y = eta X + r against its forward-backward drift system.

Randomness comes from a counter-based generator keyed by (seed, purpose)
with the path index in the counter, so the stream of any one path never
depends on how many paths are drawn or on worker scheduling. Purposes:
0 initial states, 1 path noise, 2 deviation draws.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.random import Generator, Philox

from . import lqsolver as lq
from .model import (
    E, NTILDE, P, Q, S, STATE_DIM, ProducerParams, RegulatorPolicy, StateSpace,
    demand,
)
from .numkernel import NonFinite, TimeGrid

EULER_MARUYAMA = "euler_maruyama"

_PURPOSE_INITIAL = 0
_PURPOSE_NOISE = 1
_PURPOSE_DEVIATION = 2


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo run description."""

    n_paths: int
    seed: int
    grid: TimeGrid
    scheme: str = EULER_MARUYAMA
    antithetic: bool = False

    def __post_init__(self):
        if self.n_paths < 1:
            raise ValueError("n_paths must be >= 1")
        if self.scheme != EULER_MARUYAMA:
            raise ValueError(f"unknown scheme: {self.scheme!r}")


@dataclass
class PathBundle:
    """Simulated trajectories: states, controls, and the driving increments."""

    states: np.ndarray       # (n_paths, n_nodes, 5)
    controls: np.ndarray     # (n_paths, n_nodes) realized feedback N
    grid: TimeGrid
    r_e: float


def _rng(seed: int, purpose: int, path: int) -> Generator:
    return Generator(Philox(counter=[0, 0, 0, path], key=[seed, purpose]))


def _initial_states(params: ProducerParams, sim: SimConfig,
                    first_path: int = 0) -> np.ndarray:
    """Componentwise Gaussian initial draws; antithetic pairs mirror about the mean."""
    draws = np.empty((sim.n_paths, STATE_DIM))
    mean = params.xbar0
    std = np.sqrt(params.var0)
    for j in range(sim.n_paths):
        path = first_path + j
        if sim.antithetic and path % 2 == 1:
            z = -_rng(sim.seed, _PURPOSE_INITIAL, path - 1).standard_normal(STATE_DIM)
        else:
            z = _rng(sim.seed, _PURPOSE_INITIAL, path).standard_normal(STATE_DIM)
        draws[j] = mean + std * z
    return draws


def _noise_increments(sim: SimConfig, path: int) -> np.ndarray:
    """Brownian increments, shape (n_steps, 2); antithetic odd paths negate."""
    if sim.antithetic and path % 2 == 1:
        z = -_rng(sim.seed, _PURPOSE_NOISE, path - 1).standard_normal(
            (sim.grid.n_steps, 2))
    else:
        z = _rng(sim.seed, _PURPOSE_NOISE, path).standard_normal(
            (sim.grid.n_steps, 2))
    return np.sqrt(sim.grid.dt) * z


def simulate_paths(
    ss: StateSpace,
    riccati: lq.RiccatiSolution,
    r: np.ndarray,
    params: ProducerParams,
    sim: SimConfig,
    control_bump: np.ndarray | None = None,
    first_path: int = 0,
) -> PathBundle:
    """Paths under the feedback control N = -R^{-1}B'(eta X + r).

    The noise enters as plain Euler-Maruyama Gaussian increments; the drift
    (linear in the state once the feedback is substituted) is stepped with
    the trapezoidal stencil, so the conditional-mean recursion coincides
    with the Crank-Nicolson mean-field sweep and the cumulative states P and
    Ntilde equal the trapezoidal quadratures of E and N along every path.

    ``control_bump``, when given, is a deterministic time function (per-node
    values) added to the feedback control — the deviation-test hook.
    ``first_path`` offsets the counter-based path indices, so a large run may
    be produced in chunks whose paths match a single monolithic run exactly.
    """
    if sim.grid.n_nodes != ss.grid.n_nodes or sim.grid.horizon != ss.grid.horizon:
        raise ValueError("simulation grid must match the solver grid")
    grid = sim.grid
    dt = grid.dt
    times = grid.times
    bump = np.zeros(grid.n_nodes) if control_bump is None else np.asarray(control_bump)
    if bump.shape != (grid.n_nodes,):
        raise ValueError("control_bump must have one value per grid node")

    # feedback N(t_k, x) = -(beta_k . x + gamma_k) + bump_k
    beta = np.einsum("kij,i->kj", riccati.eta, ss.B) / ss.R    # (n_nodes, 5)
    gamma = (r @ ss.B) / ss.R                                   # (n_nodes,)

    # closed-loop drift f_k(x) = m_op_k x + c_eff_k
    eye = np.eye(STATE_DIM)
    s_ctl = np.outer(ss.B, ss.B) / ss.R
    m_op = ss.A[None] - s_ctl @ riccati.eta                     # (n_nodes, 5, 5)
    c_eff = ss.C(times) - r @ s_ctl.T + bump[:, None] * ss.B[None, :]
    explicit = eye[None] + 0.5 * dt * m_op
    implicit = eye[None] - 0.5 * dt * m_op

    states = np.empty((sim.n_paths, grid.n_nodes, STATE_DIM))
    controls = np.empty((sim.n_paths, grid.n_nodes))
    states[:, 0, :] = _initial_states(params, sim, first_path)
    dw = np.stack([_noise_increments(sim, first_path + j)
                   for j in range(sim.n_paths)])
    noise = dw @ ss.Sigma.T                                     # (n_paths, steps, 5)

    x = states[:, 0, :]
    controls[:, 0] = -(x @ beta[0] + gamma[0]) + bump[0]
    for k in range(grid.n_steps):
        rhs = (x @ explicit[k].T
               + 0.5 * dt * (c_eff[k] + c_eff[k + 1])[None, :]
               + noise[:, k, :])
        x = np.linalg.solve(implicit[k + 1], rhs.T).T
        states[:, k + 1, :] = x
        controls[:, k + 1] = -(x @ beta[k + 1] + gamma[k + 1]) + bump[k + 1]

    if not np.all(np.isfinite(states)):
        raise NonFinite("simulated states left the finite range")
    return PathBundle(states=states, controls=controls, grid=grid, r_e=ss.r_e)


def empirical_cost(
    bundle: PathBundle,
    params: ProducerParams,
    policy: RegulatorPolicy,
    xbar_for_price: np.ndarray,
    r_e: float,
) -> tuple[float, float]:
    """Sample mean and standard error of the pathwise producer cost.

    Pathwise running cost c1 N^2 + p1 Ntilde + c2 (Q - D)^2
    - c3 (rho0 + rho1 (D - Qbar)) Q, trapezoidal in time, plus the terminal
    tau P_T^2 and the investment price p2 r_e. ``xbar_for_price`` supplies
    the population mean entering the price (frozen at equilibrium for the
    competitive reading, self-consistent for the cooperative one).
    """
    grid = bundle.grid
    t = grid.times
    d = demand(params, t)
    qbar = np.asarray(xbar_for_price)[:, Q]
    price = params.c3 * (params.rho0 + params.rho1 * (d - qbar))

    q = bundle.states[:, :, Q]
    running = (
        params.c1 * bundle.controls ** 2
        + params.p1 * bundle.states[:, :, NTILDE]
        + policy.c2 * (q - d) ** 2
        - price[None, :] * q
    )
    integral = np.trapezoid(running, dx=grid.dt, axis=1)
    total = integral + policy.tau * bundle.states[:, -1, P] ** 2 \
        + params.p2 * r_e

    mean = float(np.mean(total))
    n = total.size
    se = float(np.std(total, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return mean, se


def expected_cost(
    ss: StateSpace,
    riccati: lq.RiccatiSolution,
    r: np.ndarray,
    params: ProducerParams,
    policy: RegulatorPolicy,
    xbar_for_price: np.ndarray,
    control_bump: np.ndarray | None = None,
) -> float:
    """Exact expectation of the pathwise cost under the simulated system.

    The simulated paths form a linear-Gaussian recursion, so the expected
    trapezoidal cost has a closed form from the propagated mean and
    covariance. It differs from the continuous-time value-function constant
    by the deterministic quadrature error of the cost integrand (dominated
    by the ramp-up boundary layer of the control), which is why Monte Carlo
    agreement is certified against this formula.
    """
    grid = ss.grid
    dt = grid.dt
    times = grid.times
    bump = np.zeros(grid.n_nodes) if control_bump is None \
        else np.asarray(control_bump)

    beta = np.einsum("kij,i->kj", riccati.eta, ss.B) / ss.R
    gamma = (r @ ss.B) / ss.R
    eye = np.eye(STATE_DIM)
    s_ctl = np.outer(ss.B, ss.B) / ss.R
    m_op = ss.A[None] - s_ctl @ riccati.eta
    c_eff = ss.C(times) - r @ s_ctl.T + bump[:, None] * ss.B[None, :]
    explicit = eye[None] + 0.5 * dt * m_op
    implicit = eye[None] - 0.5 * dt * m_op
    noise_cov = dt * (ss.Sigma @ ss.Sigma.T)

    mean = np.empty((grid.n_nodes, STATE_DIM))
    var_q = np.empty(grid.n_nodes)      # Var(Q_k)
    var_n = np.empty(grid.n_nodes)      # Var(N_k) = beta_k V_k beta_k'
    mean[0] = params.xbar0
    cov = np.diag(params.var0).astype(float)
    var_q[0] = cov[Q, Q]
    var_n[0] = float(beta[0] @ cov @ beta[0])
    for k in range(grid.n_steps):
        drive = 0.5 * dt * (c_eff[k] + c_eff[k + 1])
        mean[k + 1] = np.linalg.solve(implicit[k + 1],
                                      explicit[k] @ mean[k] + drive)
        inv_next = np.linalg.inv(implicit[k + 1])
        cov = inv_next @ (explicit[k] @ cov @ explicit[k].T + noise_cov) \
            @ inv_next.T
        var_q[k + 1] = cov[Q, Q]
        var_n[k + 1] = float(beta[k + 1] @ cov @ beta[k + 1])
    var_p_t = cov[P, P]

    d = demand(params, times)
    qbar = np.asarray(xbar_for_price)[:, Q]
    price = params.c3 * (params.rho0 + params.rho1 * (d - qbar))
    n_mean = -(np.einsum("kj,kj->k", mean, beta) + gamma) + bump
    running = (
        params.c1 * (n_mean ** 2 + var_n)
        + params.p1 * mean[:, NTILDE]
        + policy.c2 * ((mean[:, Q] - d) ** 2 + var_q)
        - price * mean[:, Q]
    )
    return float(
        np.trapezoid(running, dx=dt)
        + policy.tau * (mean[-1, P] ** 2 + var_p_t)
        + params.p2 * ss.r_e
    )


@dataclass
class StreamedSummary:
    """Chunked Monte Carlo estimates for large path counts."""

    cost_mean: float
    cost_se: float
    mean_traj: np.ndarray    # (n_nodes, 5) sample mean of the states
    se_traj: np.ndarray      # (n_nodes, 5) standard error of the mean
    n_paths: int


def streamed_summary(
    ss: StateSpace,
    riccati: lq.RiccatiSolution,
    r: np.ndarray,
    params: ProducerParams,
    policy: RegulatorPolicy,
    xbar_for_price: np.ndarray,
    sim: SimConfig,
    chunk_size: int = 4096,
) -> StreamedSummary:
    """Cost and mean-trajectory estimates over ``sim.n_paths`` paths in chunks.

    The per-path streams are counter-based, and the accumulation order is
    fixed by the constant chunk size, so the result is independent of how the
    work is scheduled. Cost moments are accumulated about a shift (the first
    path's total) to avoid cancellation at large cost magnitudes.
    """
    if chunk_size < 2 or chunk_size % 2:
        raise ValueError("chunk_size must be an even integer >= 2")
    n = sim.n_paths
    nodes = sim.grid.n_nodes
    shift = None
    traj_shift = None
    s1 = 0.0
    s2 = 0.0
    traj1 = np.zeros((nodes, STATE_DIM))
    traj2 = np.zeros((nodes, STATE_DIM))
    from dataclasses import replace as _replace
    for start in range(0, n, chunk_size):
        m = min(chunk_size, n - start)
        bundle = simulate_paths(ss, riccati, r, params,
                                _replace(sim, n_paths=m), first_path=start)
        totals = _pathwise_totals(bundle, params, policy, xbar_for_price, ss.r_e)
        if shift is None:
            shift = float(totals[0])
            traj_shift = bundle.states[0].copy()
        centered = totals - shift
        s1 += float(centered.sum())
        s2 += float((centered * centered).sum())
        traj_centered = bundle.states - traj_shift[None]
        traj1 += traj_centered.sum(axis=0)
        traj2 += (traj_centered * traj_centered).sum(axis=0)

    cost_mean = shift + s1 / n
    if n > 1:
        var = max(s2 - n * (s1 / n) ** 2, 0.0) / (n - 1)
        cost_se = float(np.sqrt(var / n))
    else:
        cost_se = 0.0
    mean_traj = traj_shift + traj1 / n
    if n > 1:
        traj_var = np.maximum(traj2 - n * (traj1 / n) ** 2, 0.0) / (n - 1)
        se_traj = np.sqrt(traj_var / n)
    else:
        se_traj = np.zeros_like(mean_traj)
    return StreamedSummary(cost_mean=float(cost_mean), cost_se=cost_se,
                           mean_traj=mean_traj, se_traj=se_traj, n_paths=n)


@dataclass
class DeviationReport:
    """Equilibrium certificate from random admissible deviations."""

    differences: np.ndarray      # deviation cost - equilibrium cost, per trial
    std_errors: np.ndarray       # SE of each paired (common-random-number) difference
    min_difference: float
    min_std_error: float         # SE at the minimizing trial
    passed: bool                 # no difference below -2 SE


def _mean_field_under_bump(
    ss: StateSpace,
    riccati: lq.RiccatiSolution,
    r: np.ndarray,
    bump: np.ndarray,
) -> np.ndarray:
    """Deterministic mean trajectory when everyone adds ``bump`` to the feedback."""
    grid = ss.grid
    dt = grid.dt
    eye = np.eye(STATE_DIM)
    s_ctl = np.outer(ss.B, ss.B) / ss.R
    m_op = ss.A[None] - s_ctl @ riccati.eta
    c_eff = ss.C(grid.times) - r @ s_ctl.T + bump[:, None] * ss.B[None, :]
    xbar = np.empty((grid.n_nodes, STATE_DIM))
    xbar[0] = ss.params.xbar0
    for k in range(grid.n_steps):
        rhs = (eye + 0.5 * dt * m_op[k]) @ xbar[k] + 0.5 * dt * (c_eff[k] + c_eff[k + 1])
        xbar[k + 1] = np.linalg.solve(eye - 0.5 * dt * m_op[k + 1], rhs)
    return xbar


def deviation_test(
    eq,
    params: ProducerParams,
    policy: RegulatorPolicy,
    sim: SimConfig,
    n_deviations: int,
) -> DeviationReport:
    """Certify an equilibrium by paired Monte Carlo deviations.

    Each trial perturbs the investment level (uniform over its bounds) and
    adds a bounded sinusoidal bump to the feedback control, then re-simulates
    with the same Brownian increments. Competitive reading: the population
    mean entering the price stays at the equilibrium. Cooperative reading:
    the deviation moves everyone, so the mean is recomputed under the bump.
    A difference below -2 SE fails the certificate.

    The bump is tapered to zero over the first few percent of the horizon
    and at the terminal time, and its amplitude is scaled by the median
    control magnitude: the optimal control has a short, violent ramp-up
    boundary layer that the time grid cannot resolve, and deviations aimed
    at that layer probe the quadrature error of the discretization rather
    than the optimality of the control.

    ``eq`` is an EquilibriumResult with a converged solution.
    """
    from . import equilibria  # deferred: avoids an import cycle at module load

    if eq.status != equilibria.CONVERGED:
        raise ValueError("deviation test requires a converged equilibrium")
    sol = eq.solution
    from .model import build_state_space

    ss = build_state_space(params, policy, eq.r_e_hat, sim.grid)
    base_bundle = simulate_paths(ss, sol.riccati, sol.r, params, sim)
    base_xbar = sol.xbar
    base_cost, _ = empirical_cost(base_bundle, params, policy, base_xbar, eq.r_e_hat)

    n_scale = 1.0 + float(np.median(np.abs(
        lq.mean_control(ss, sol.riccati, sol.r, sol.xbar))))
    rng = _rng(sim.seed, _PURPOSE_DEVIATION, 0)
    lo, hi = params.re_bounds
    t = sim.grid.times
    horizon = sim.grid.horizon
    t0 = 0.05 * horizon
    window = np.where(
        t >= t0, np.sin(np.pi * np.clip((t - t0) / (horizon - t0), 0.0, 1.0)) ** 2, 0.0
    )

    diffs = np.empty(n_deviations)
    ses = np.empty(n_deviations)
    for i in range(n_deviations):
        r_e_dev = float(rng.uniform(lo, hi))
        amp = float(rng.uniform(0.0, 0.05)) * n_scale
        freq = float(rng.uniform(0.5, 4.0)) * 2.0 * np.pi / horizon
        phase = float(rng.uniform(0.0, 2.0 * np.pi))
        bump = amp * np.cos(freq * t + phase) * window

        ss_dev = build_state_space(params, policy, r_e_dev, sim.grid)
        dev_bundle = simulate_paths(ss_dev, sol.riccati, sol.r, params, sim,
                                    control_bump=bump)
        if eq.kind == lq.MFC:
            xbar_price = _mean_field_under_bump(ss_dev, sol.riccati, sol.r, bump)
        else:
            xbar_price = base_xbar
        dev_cost, _ = empirical_cost(dev_bundle, params, policy, xbar_price, r_e_dev)

        # paired difference with common random numbers
        base_tot = _pathwise_totals(base_bundle, params, policy, base_xbar, eq.r_e_hat)
        dev_tot = _pathwise_totals(dev_bundle, params, policy, xbar_price, r_e_dev)
        delta = dev_tot - base_tot
        diffs[i] = float(np.mean(delta))
        n = delta.size
        ses[i] = float(np.std(delta, ddof=1) / np.sqrt(n)) if n > 1 else 0.0

    k_min = int(np.argmin(diffs))
    passed = bool(np.all(diffs >= -2.0 * ses))
    return DeviationReport(
        differences=diffs, std_errors=ses, min_difference=float(diffs[k_min]),
        min_std_error=float(ses[k_min]), passed=passed,
    )


def _pathwise_totals(bundle, params, policy, xbar_for_price, r_e) -> np.ndarray:
    """Per-path total cost (the summand behind empirical_cost)."""
    grid = bundle.grid
    t = grid.times
    d = demand(params, t)
    qbar = np.asarray(xbar_for_price)[:, Q]
    price = params.c3 * (params.rho0 + params.rho1 * (d - qbar))
    q = bundle.states[:, :, Q]
    running = (
        params.c1 * bundle.controls ** 2
        + params.p1 * bundle.states[:, :, NTILDE]
        + policy.c2 * (q - d) ** 2
        - price[None, :] * q
    )
    return np.trapezoid(running, dx=grid.dt, axis=1) \
        + policy.tau * bundle.states[:, -1, P] ** 2 + params.p2 * r_e


@dataclass
class CostateReport:
    """Consistency of the costate Y = eta X + r with its drift system."""

    control_identity_max: float      # max |N + (Y1 k1 + Y3 delta + Y5)/(2 c1)|
    terminal_max_error: float        # max over terminal conditions, relative
    drift_means: np.ndarray          # (5,) time-mean of the drift residual mean
    drift_ses: np.ndarray            # (5,) matching standard errors
    drift_tolerances: np.ndarray     # (5,) discretization allowance + 3 SE
    passed: bool


def costate_residual(
    eq,
    params: ProducerParams,
    policy: RegulatorPolicy,
    sim: SimConfig,
) -> CostateReport:
    """Check Y := eta X + r along simulated paths against the costate drifts.

    Component drifts (cooperative variant doubles the mean-production term):

        dY1 = (-2 c2 (Q - D) + c3 (rho0 + rho1 (D - Qbar))) dt + ...
        dY2 = (kappa2 r_e Y1 + Y2) dt + ...
        dY3 = -Y4 dt
        dY4 = 0
        dY5 = -p1 dt

    with terminal values Y4_T = 2 tau P_T and zero otherwise, and the
    pointwise control identity N = -(Y1 kappa1 + Y3 delta + Y5) / (2 c1).
    Drift residual means must vanish within a discretization allowance of
    order dt plus three standard errors.
    """
    from . import equilibria
    from .model import build_state_space

    if eq.status != equilibria.CONVERGED:
        raise ValueError("costate check requires a converged equilibrium")
    sol = eq.solution
    ss = build_state_space(params, policy, eq.r_e_hat, sim.grid)
    bundle = simulate_paths(ss, sol.riccati, sol.r, params, sim)

    grid = sim.grid
    t = grid.times
    dt = grid.dt
    eta = sol.riccati.eta
    y = np.einsum("kij,pkj->pki", eta, bundle.states) + sol.r[None, :, :]

    # pointwise control identity (same linear form on both sides)
    identity = bundle.controls + (
        y[:, :, Q] * params.kappa1 + y[:, :, E] * params.delta + y[:, :, NTILDE]
    ) / (2.0 * params.c1)
    ctl_scale = 1.0 + np.abs(bundle.controls).max()
    control_identity_max = float(np.abs(identity).max()) / ctl_scale

    # terminal conditions, relative to the costate magnitude
    y_t = y[:, -1, :]
    term_target = np.zeros_like(y_t)
    term_target[:, P] = 2.0 * policy.tau * bundle.states[:, -1, P]
    term_scale = 1.0 + float(np.abs(y_t).max())
    terminal_max_error = float(np.abs(y_t - term_target).max()) / term_scale

    d = demand(params, t)
    qbar = sol.xbar[:, Q]
    q_paths = bundle.states[:, :, Q]
    if eq.kind == lq.MFC:
        price_term = (params.rho0 + params.rho1 * d - 2.0 * params.rho1 * qbar)[None, :]
    else:
        price_term = (params.rho0 + params.rho1 * (d - qbar))[None, :]
    drift = np.empty_like(y)
    drift[:, :, Q] = -2.0 * policy.c2 * (q_paths - d) + params.c3 * price_term
    drift[:, :, S] = params.kappa2 * eq.r_e_hat * y[:, :, Q] + y[:, :, S]
    drift[:, :, E] = -y[:, :, P]
    drift[:, :, P] = 0.0
    drift[:, :, NTILDE] = -params.p1

    dy = y[:, 1:, :] - y[:, :-1, :]
    resid = dy - 0.5 * dt * (drift[:, 1:, :] + drift[:, :-1, :])

    # residual of the step means across paths, aggregated over time
    step_mean = resid.mean(axis=0)                        # (n_steps, 5)
    n_paths = bundle.states.shape[0]
    step_se = resid.std(axis=0, ddof=1) / np.sqrt(n_paths) if n_paths > 1 \
        else np.zeros_like(step_mean)
    drift_means = np.abs(step_mean).mean(axis=0)
    drift_ses = step_se.mean(axis=0)
    # trapezoidal truncation allowance: O(dt^2) against the magnitude of the
    # costate and of its drift (the third derivative entering the truncation
    # constant is bounded by a moderate multiple of these scales)
    y_scale = 1.0 + np.maximum(np.abs(y).max(axis=(0, 1)),
                               np.abs(drift).max(axis=(0, 1)))
    drift_tolerances = 3.0 * drift_ses + 5.0 * dt * dt * y_scale \
        + 1e-9 * y_scale

    passed = bool(
        control_identity_max <= 1e-10
        and terminal_max_error <= 1e-10
        and np.all(drift_means <= drift_tolerances)
    )
    return CostateReport(
        control_identity_max=control_identity_max,
        terminal_max_error=terminal_max_error,
        drift_means=drift_means, drift_ses=drift_ses,
        drift_tolerances=drift_tolerances, passed=passed,
    )
