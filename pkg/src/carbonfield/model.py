"""Producer model assembly: calibrated parameters and the state-space matrices.

The producer state is the 5-vector ``X = [Q, S, E, P, Ntilde]``:

* Q       instantaneous electricity production (MWh per time unit)
* S       solar irradiance deviation process (OU around theta)
* E       instantaneous emission level
* P       cumulative pollution
* Ntilde  instantaneous nonrenewable production rate (fuel units)

This ordering is fixed globally; every matrix index below refers to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .numkernel import TimeGrid

STATE_DIM = 5
Q, S, E, P, NTILDE = range(STATE_DIM)

#: relative tolerance of the production reconstruction identity
DECOMPOSITION_RTOL = 1e-6


class InvalidParams(Exception):
    """A model parameter violates its admissibility constraints."""


class DecompositionMismatch(Exception):
    """Renewable + nonrenewable production does not reconstruct the mean output."""


@dataclass(frozen=True)
class ProducerParams:
    """Scalar model constants of the representative producer.

    Rates (``p1``, ``rho0``, ``rho1``) are stored per unit of model time
    (years). The scenario loader converts the per-step calibration values; see
    :func:`carbonfield.scenario.load_config`.
    """

    c1: float            # ramping cost on the fuel control
    c3: float            # revenue scale
    p1: float            # fuel price rate
    p2: float            # renewable investment price per unit r_e
    rho0: float          # inverse demand intercept rate
    rho1: float          # inverse demand slope rate
    kappa1: float        # MWh per fuel unit
    kappa2: float        # MWh per renewable investment unit
    alpha: float         # irradiance seasonality angular frequency
    theta: float         # irradiance mean
    sigma0: float        # irradiance volatility
    sigma1: float        # emission volatility
    delta: float         # emission per fuel unit
    demand_base: float
    demand_amplitude: float
    demand_frequency: float
    xbar0: np.ndarray    # initial state mean, shape (5,)
    var0: np.ndarray     # initial state componentwise variance, shape (5,)
    re_bounds: tuple[float, float]

    def __post_init__(self):
        object.__setattr__(self, "xbar0", np.asarray(self.xbar0, dtype=float))
        object.__setattr__(self, "var0", np.asarray(self.var0, dtype=float))
        object.__setattr__(self, "re_bounds", (float(self.re_bounds[0]), float(self.re_bounds[1])))
        self._validate()

    def _validate(self) -> None:
        positive = {"c1": self.c1, "c3": self.c3, "rho0": self.rho0,
                    "kappa1": self.kappa1, "kappa2": self.kappa2, "theta": self.theta}
        for name, value in positive.items():
            if not value > 0:
                raise InvalidParams(f"{name} must be > 0, got {value}")
        nonnegative = {"rho1": self.rho1, "sigma0": self.sigma0, "sigma1": self.sigma1,
                       "delta": self.delta, "p2": self.p2}
        for name, value in nonnegative.items():
            if not value >= 0:
                raise InvalidParams(f"{name} must be >= 0, got {value}")
        if self.xbar0.shape != (STATE_DIM,) or self.var0.shape != (STATE_DIM,):
            raise InvalidParams("xbar0 and var0 must have shape (5,)")
        if np.any(self.var0 < 0):
            raise InvalidParams("var0 entries must be >= 0")
        lo, hi = self.re_bounds
        if not (0 <= lo <= hi):
            raise InvalidParams(f"re_bounds must satisfy 0 <= lo <= hi, got {self.re_bounds}")


@dataclass(frozen=True)
class RegulatorPolicy:
    """The regulator's two time-independent controls."""

    tau: float   # carbon tax coefficient on squared terminal pollution
    c2: float    # demand-mismatch penalty

    def __post_init__(self):
        if not self.tau >= 0:
            raise InvalidParams(f"tau must be >= 0, got {self.tau}")
        if not self.c2 >= 0:
            raise InvalidParams(f"c2 must be >= 0, got {self.c2}")


def demand(params: ProducerParams, t: float | np.ndarray) -> float | np.ndarray:
    """Seasonal electricity demand D(t) = base - amplitude * cos(frequency * t)."""
    return params.demand_base - params.demand_amplitude * np.cos(params.demand_frequency * t)


@dataclass(frozen=True)
class StateSpace:
    """The time-indexed linear-quadratic system for a fixed (policy, r_e).

    Constant matrices are plain arrays; the time-dependent coefficients
    ``C``, ``H`` and ``J`` are exposed as vectorized methods of calendar time.
    """

    A: np.ndarray        # (5, 5) drift matrix
    B: np.ndarray        # (5,) control loading
    Sigma: np.ndarray    # (5, 2) noise loading
    a: np.ndarray        # (5, 5) = Sigma Sigma^T / 2
    F: np.ndarray        # (5, 5) mean-field price coupling
    G: np.ndarray        # (5, 5) quadratic running cost
    S_T: np.ndarray      # (5, 5) terminal cost
    R: float             # quadratic control cost, 2 * c1
    grid: TimeGrid
    r_e: float
    params: ProducerParams = field(repr=False)
    policy: RegulatorPolicy = field(repr=False)

    def C(self, t: float | np.ndarray) -> np.ndarray:
        """Affine drift; shape (5,) for scalar t, (len(t), 5) for arrays."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (STATE_DIM,))
        p = self.params
        out[..., Q] = self.r_e * p.kappa2 * (p.alpha * np.cos(p.alpha * t) + p.theta)
        out[..., S] = p.theta
        return out

    def H(self, t: float | np.ndarray) -> np.ndarray:
        """Linear running cost coefficient; same shape convention as C."""
        t = np.asarray(t, dtype=float)
        out = np.zeros(t.shape + (STATE_DIM,))
        p = self.params
        d = demand(p, t)
        out[..., Q] = -(2.0 * self.policy.c2 + p.c3 * p.rho1) * d - p.c3 * p.rho0
        out[..., NTILDE] = p.p1
        return out

    def J(self, t: float | np.ndarray) -> float | np.ndarray:
        """Scalar running cost offset c2 * D(t)^2."""
        d = demand(self.params, t)
        return self.policy.c2 * d * d


def build_state_space(
    params: ProducerParams,
    policy: RegulatorPolicy,
    r_e: float,
    grid: TimeGrid,
) -> StateSpace:
    """Assemble the matrix system for a given renewable investment level."""
    lo, hi = params.re_bounds
    if not (lo <= r_e <= hi):
        raise InvalidParams(f"r_e = {r_e} outside admissible bounds [{lo}, {hi}]")

    A = np.zeros((STATE_DIM, STATE_DIM))
    A[Q, S] = -params.kappa2 * r_e
    A[S, S] = -1.0
    A[P, E] = 1.0

    B = np.array([params.kappa1, 0.0, params.delta, 0.0, 1.0])

    Sigma = np.zeros((STATE_DIM, 2))
    Sigma[Q, 0] = params.kappa2 * r_e * params.sigma0
    Sigma[S, 0] = params.sigma0
    Sigma[E, 1] = params.sigma1

    a = 0.5 * Sigma @ Sigma.T

    F = np.zeros((STATE_DIM, STATE_DIM))
    F[Q, Q] = params.c3 * params.rho1

    G = np.zeros((STATE_DIM, STATE_DIM))
    G[Q, Q] = policy.c2

    S_T = np.zeros((STATE_DIM, STATE_DIM))
    S_T[P, P] = policy.tau

    return StateSpace(
        A=A, B=B, Sigma=Sigma, a=a, F=F, G=G, S_T=S_T,
        R=2.0 * params.c1, grid=grid, r_e=r_e, params=params, policy=policy,
    )


def production_decomposition(
    xbar: np.ndarray,
    params: ProducerParams,
    r_e: float,
    grid: TimeGrid,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the mean production into renewable and nonrenewable components.

    Integrating the production dynamics dQ = kappa1 N dt + kappa2 r_e dS*
    (with dS* the seasonal-plus-irradiance increment) gives the exact
    identity

        Qbar(t) = xbar0[Q] + kappa1 * (Nbar(t) - Nbar(0))
                  + kappa2 * r_e * (sin(alpha t) + Sbar(t) - Sbar(0))

    which assigns the irradiance-driven part to renewables and the
    fuel-driven part (plus the standalone baseline) to nonrenewables.
    Trajectories are produced by the trapezoidal stencil, so the seasonal
    antiderivative sin(alpha t) is realized as the matching trapezoidal
    cumulative integral of its derivative alpha cos(alpha t); with that
    reading the identity holds to round-off on the grid (and converges to
    the closed form as the grid refines).
    Returns ``(renewable, nonrenewable, total)`` on the grid nodes.

    Raises DecompositionMismatch when the reconstruction identity fails,
    which signals a trajectory inconsistent with the dynamics.
    """
    xbar = np.asarray(xbar, dtype=float)
    if xbar.shape != (grid.n_nodes, STATE_DIM):
        raise ValueError(f"expected trajectory of shape {(grid.n_nodes, STATE_DIM)}")
    t = grid.times
    seasonal = cumulative_trapezoid(
        params.alpha * np.cos(params.alpha * t), dx=grid.dt, initial=0.0)
    renewable = params.kappa2 * r_e * (
        seasonal + xbar[:, S] - xbar[0, S]
    )
    nonrenewable = params.xbar0[Q] + params.kappa1 * (xbar[:, NTILDE] - xbar[0, NTILDE])
    total = renewable + nonrenewable

    scale = max(1.0, float(np.max(np.abs(xbar[:, Q]))))
    mismatch = float(np.max(np.abs(total - xbar[:, Q]))) / scale
    if mismatch > DECOMPOSITION_RTOL:
        raise DecompositionMismatch(
            f"reconstruction error {mismatch:.3e} exceeds {DECOMPOSITION_RTOL:.0e}"
        )
    return renewable, nonrenewable, total
