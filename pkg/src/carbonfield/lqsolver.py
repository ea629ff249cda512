"""Riccati, adjoint and mean-field ODE solves on the time grid.

The quadratic value-function coefficient eta solves a stiff matrix Riccati
equation (the control weight R = 2*c1 is tiny, so feedback rates are orders
of magnitude faster than the grid step). It is integrated with an implicit
stiff method and reported at the grid nodes.

The linear coefficient r and the mean field xbar are solved with the
Crank-Nicolson (trapezoidal) stencil on the grid, exactly: the competitive
case decouples into a backward sweep for r followed by a forward sweep for
xbar, while the cooperative case couples them into one block two-point
boundary system solved directly. Because the discrete solutions satisfy
their stencils to round-off, the residual diagnostics below are meaningful
at any tolerance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse
from scipy.integrate import solve_ivp

from . import numkernel
from .model import (
    STATE_DIM, ProducerParams, RegulatorPolicy, StateSpace,
)
from .numkernel import NonFinite, TimeGrid, symmetrize_and_check_psd, trapezoid

MFG = "mfg"
MFC = "mfc"

#: relative eigenvalue tolerance of the Riccati PSD diagnostic (scaled by
#: the matrix magnitude; eta entries reach ~1e6 at calibrated parameters)
PSD_TOL = 1e-8


@dataclass(frozen=True)
class RiccatiSolution:
    """eta at every grid node, symmetric PSD, with eta_T = 2 S_T exactly."""

    eta: np.ndarray          # (n_nodes, 5, 5)
    min_eigenvalue_0: float  # smallest eigenvalue at t = 0


@dataclass(frozen=True)
class MeanFieldSolution:
    """A solved (eta, r, xbar) triple with its value-function constant and cost."""

    kind: str                # MFG or MFC
    riccati: RiccatiSolution
    r: np.ndarray            # (n_nodes, 5)
    xbar: np.ndarray         # (n_nodes, 5)
    s0: float
    analytic_cost: float
    r_e: float
    policy: RegulatorPolicy
    grid: TimeGrid
    params: ProducerParams = None


def _control_quadratic(ss: StateSpace) -> np.ndarray:
    """B R^{-1} B^T, the feedback quadratic form."""
    return np.outer(ss.B, ss.B) / ss.R


def solve_riccati(ss: StateSpace, rtol: float = 1e-10, atol: float = 1e-12) -> RiccatiSolution:
    """Integrate the backward matrix Riccati equation on the grid.

    d(eta)/dt = eta B R^{-1} B^T eta - A^T eta - eta A - 2 G, eta_T = 2 S_T.

    Integrated in reversed time with LSODA, which switches to an implicit
    BDF scheme on the stiff segments (the problem is stiff for small R).
    The result is symmetrized at every reported node and PSD-checked at
    t = 0; the terminal node is pinned to 2 S_T exactly.

    Raises NonFinite on integrator failure or blow-up, NotPSD when the
    initial-time solution has an eigenvalue below -PSD_TOL.
    """
    s_ctl = _control_quadratic(ss)
    a_t = ss.A.T
    two_g = 2.0 * ss.G

    def rhs(_s, y):
        # reversed time s = T - t: d(eta)/ds = -eta S eta + A^T eta + eta A + 2G
        eta = y.reshape(STATE_DIM, STATE_DIM)
        eta = 0.5 * (eta + eta.T)
        d = -eta @ s_ctl @ eta + a_t @ eta + eta @ ss.A + two_g
        return (0.5 * (d + d.T)).ravel()

    terminal = 2.0 * ss.S_T
    s_nodes = ss.grid.horizon - ss.grid.times[::-1]  # 0 .. T in reversed time
    sol = solve_ivp(
        rhs,
        (0.0, ss.grid.horizon),
        terminal.ravel(),
        method="LSODA",
        t_eval=s_nodes,
        rtol=rtol,
        atol=atol,
    )
    if not sol.success:
        raise NonFinite(f"Riccati integration failed: {sol.message}")

    eta = sol.y.T.reshape(-1, STATE_DIM, STATE_DIM)[::-1].copy()
    eta = 0.5 * (eta + np.transpose(eta, (0, 2, 1)))
    eta[-1] = terminal
    if not np.all(np.isfinite(eta)):
        raise NonFinite("Riccati solution left the finite range")
    psd_scale = 1.0 + float(np.abs(eta[0]).max())
    _, min_eig = symmetrize_and_check_psd(eta[0], PSD_TOL * psd_scale)
    return RiccatiSolution(eta=eta, min_eigenvalue_0=min_eig)


class _StepKernel:
    """Node-sampled coefficients and factored Crank-Nicolson step operators.

    Everything here depends on (state space, eta) but not on the mean field,
    so one kernel serves every fixed-point iteration at a given r_e.
    """

    def __init__(self, ss: StateSpace, riccati: RiccatiSolution):
        self.ss = ss
        self.grid = ss.grid
        eta = riccati.eta
        t = self.grid.times
        dt = self.grid.dt
        s_ctl = _control_quadratic(ss)
        eye = np.eye(STATE_DIM)

        self.s_ctl = s_ctl
        self.c_nodes = ss.C(t)                      # (n, 5)
        self.h_nodes = ss.H(t)
        self.j_nodes = ss.J(t)
        self.L = ss.A.T[None] - eta @ s_ctl         # backward r operator
        self.M = ss.A[None] - s_ctl @ eta           # forward xbar operator
        # eta_k C_k, the state-independent part of the r forcing
        self.etaC = np.einsum("kij,kj->ki", eta, self.c_nodes)
        self.back_inv = np.linalg.inv(eye[None] - 0.5 * dt * self.L)
        self.fwd_inv = np.linalg.inv(eye[None] - 0.5 * dt * self.M)

    def sweep_r(self, forcing: np.ndarray) -> np.ndarray:
        """Backward trapezoidal sweep of -dr/dt = L r + forcing, r_T = 0."""
        dt = self.grid.dt
        n = self.grid.n_steps
        eye = np.eye(STATE_DIM)
        r = np.zeros((n + 1, STATE_DIM))
        for k in range(n - 1, -1, -1):
            rhs = (eye + 0.5 * dt * self.L[k + 1]) @ r[k + 1] \
                + 0.5 * dt * (forcing[k] + forcing[k + 1])
            r[k] = self.back_inv[k] @ rhs
        return r

    def sweep_xbar(self, r: np.ndarray, x0: np.ndarray) -> np.ndarray:
        """Forward trapezoidal sweep of dxbar/dt = M xbar - S r + C."""
        dt = self.grid.dt
        n = self.grid.n_steps
        eye = np.eye(STATE_DIM)
        c_eff = self.c_nodes - r @ self.s_ctl.T
        xbar = np.zeros((n + 1, STATE_DIM))
        xbar[0] = x0
        for k in range(n):
            rhs = (eye + 0.5 * dt * self.M[k]) @ xbar[k] \
                + 0.5 * dt * (c_eff[k] + c_eff[k + 1])
            xbar[k + 1] = self.fwd_inv[k + 1] @ rhs
        return xbar


def solve_r_mfg(
    ss: StateSpace, riccati: RiccatiSolution, xbar_fixed: np.ndarray
) -> np.ndarray:
    """Solve the competitive adjoint equation with an exogenous mean field.

    -dr/dt = (A^T - eta B R^{-1} B^T) r + eta C + H + F^T xbar, r_T = 0.
    """
    kernel = _StepKernel(ss, riccati)
    forcing = kernel.etaC + kernel.h_nodes + xbar_fixed @ ss.F
    return kernel.sweep_r(forcing)


def solve_xbar(
    ss: StateSpace, riccati: RiccatiSolution, r: np.ndarray
) -> np.ndarray:
    """Propagate the mean field under the feedback control from (eta, r)."""
    kernel = _StepKernel(ss, riccati)
    return kernel.sweep_xbar(r, ss.params.xbar0)


def solve_coupled_mfc(
    ss: StateSpace, riccati: RiccatiSolution
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the cooperative (r, xbar) system in one shot.

    The cooperative adjoint carries the extra F xbar forcing, which couples
    the backward r sweep to the forward xbar sweep. Both trapezoidal stencils
    plus the two boundary rows form one block linear system over all nodes,
    solved by direct sparse LU (bandwidth ~4 state blocks; a dense
    factorization of the same system is checked against this in the tests).

    Unknown ordering: [xbar_0 .. xbar_n, r_0 .. r_n].
    """
    kernel = _StepKernel(ss, riccati)
    grid = ss.grid
    n = grid.n_steps
    dt = grid.dt
    d = STATE_DIM
    eye = np.eye(d)
    f_sym = ss.F + ss.F.T
    base_forcing = kernel.etaC + kernel.h_nodes   # eta C + H at nodes

    rows, cols, vals = [], [], []
    rhs = np.zeros(2 * d * (n + 1))

    def put(block_row, block_col, mat):
        r0, c0 = d * block_row, d * block_col
        i, j = np.nonzero(mat)
        rows.append(r0 + i)
        cols.append(c0 + j)
        vals.append(mat[i, j])

    x_off = 0            # xbar block-column offset (in blocks)
    r_off = n + 1        # r block-column offset

    # boundary: xbar_0 = xbar(0)
    put(0, x_off, eye)
    rhs[:d] = ss.params.xbar0

    # forward rows k = 0..n-1:
    #   xbar_{k+1} - xbar_k - dt/2 [M_k xbar_k + M_{k+1} xbar_{k+1}
    #                               - S (r_k + r_{k+1}) + C_k + C_{k+1}] = 0
    for k in range(n):
        br = 1 + k
        put(br, x_off + k, -eye - 0.5 * dt * kernel.M[k])
        put(br, x_off + k + 1, eye - 0.5 * dt * kernel.M[k + 1])
        put(br, r_off + k, 0.5 * dt * kernel.s_ctl)
        put(br, r_off + k + 1, 0.5 * dt * kernel.s_ctl)
        rhs[d * br:d * (br + 1)] = 0.5 * dt * (kernel.c_nodes[k] + kernel.c_nodes[k + 1])

    # backward rows k = 0..n-1:
    #   r_{k+1} - r_k + dt/2 [L_k r_k + L_{k+1} r_{k+1}
    #                         + (F + F^T)(xbar_k + xbar_{k+1}) + b_k + b_{k+1}] = 0
    for k in range(n):
        br = n + 1 + k
        put(br, r_off + k, -eye + 0.5 * dt * kernel.L[k])
        put(br, r_off + k + 1, eye + 0.5 * dt * kernel.L[k + 1])
        put(br, x_off + k, 0.5 * dt * f_sym)
        put(br, x_off + k + 1, 0.5 * dt * f_sym)
        rhs[d * br:d * (br + 1)] = -0.5 * dt * (base_forcing[k] + base_forcing[k + 1])

    # boundary: r_n = 0
    put(2 * n + 1, r_off + n, eye)

    system = sparse.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(2 * d * (n + 1), 2 * d * (n + 1)),
    )
    solution = numkernel.solve_sparse(system, rhs)
    xbar = solution[: d * (n + 1)].reshape(n + 1, d)
    r = solution[d * (n + 1):].reshape(n + 1, d)
    return r, xbar


def r_stencil_residual(
    ss: StateSpace,
    riccati: RiccatiSolution,
    r: np.ndarray,
    xbar: np.ndarray,
    kind: str,
) -> float:
    """Largest relative trapezoidal-stencil residual of the r equation."""
    kernel = _StepKernel(ss, riccati)
    f_mat = ss.F.T if kind == MFG else ss.F.T + ss.F
    forcing = kernel.etaC + kernel.h_nodes + xbar @ f_mat.T
    deriv = -(np.einsum("kij,kj->ki", kernel.L, r) + forcing)
    return _stencil_residual(r, deriv, ss.grid)


def xbar_stencil_residual(
    ss: StateSpace, riccati: RiccatiSolution, r: np.ndarray, xbar: np.ndarray
) -> float:
    """Largest relative trapezoidal-stencil residual of the mean-field equation."""
    kernel = _StepKernel(ss, riccati)
    deriv = np.einsum("kij,kj->ki", kernel.M, xbar) - r @ kernel.s_ctl.T + kernel.c_nodes
    return _stencil_residual(xbar, deriv, ss.grid)


def _stencil_residual(y: np.ndarray, deriv: np.ndarray, grid: TimeGrid) -> float:
    dt = grid.dt
    res = y[1:] - y[:-1] - 0.5 * dt * (deriv[1:] + deriv[:-1])
    scale = dt * (1.0 + np.maximum(
        np.max(np.abs(deriv[1:]), axis=1), np.max(np.abs(deriv[:-1]), axis=1)
    ))
    return float(np.max(np.max(np.abs(res), axis=1) / scale))


def compute_s0(ss: StateSpace, riccati: RiccatiSolution, r: np.ndarray) -> float:
    """Value-function constant at t = 0.

    s0 = p2 r_e + int_0^T [ tr(a eta) - (B^T r)^2 / (2R) + C . r + J ] dt.
    """
    eta = riccati.eta
    br = r @ ss.B
    kernel_c = ss.C(ss.grid.times)
    integrand = (
        np.einsum("ij,kji->k", ss.a, eta)
        - 0.5 * br * br / ss.R
        + np.einsum("ki,ki->k", kernel_c, r)
        + ss.J(ss.grid.times)
    )
    return ss.params.p2 * ss.r_e + float(trapezoid(integrand, ss.grid))


def analytic_cost(sol: MeanFieldSolution, params: ProducerParams) -> float:
    """Expected producer cost from the quadratic value-function ansatz.

    The initial quadratic term E[x0' eta0 x0] splits into the trace against
    the (diagonal) initial covariance plus the mean contribution. The
    cooperative cost subtracts the mean-field price correction.
    """
    eta0 = sol.riccati.eta[0]
    x0 = sol.xbar[0]
    cost = 0.5 * (float(np.sum(np.diag(eta0) * params.var0)) + float(x0 @ eta0 @ x0))
    cost += float(x0 @ sol.r[0]) + sol.s0
    if sol.kind == MFC:
        f = np.zeros((STATE_DIM, STATE_DIM))
        f[0, 0] = params.c3 * params.rho1
        correction = trapezoid(np.einsum("ki,ij,kj->k", sol.xbar, f, sol.xbar), sol.grid)
        cost -= float(correction)
    return cost


def feedback_control(
    ss: StateSpace,
    riccati: RiccatiSolution,
    r: np.ndarray,
    x: np.ndarray,
    t: float,
) -> float:
    """Optimal fuel-rate control N = -R^{-1} B^T (eta_t x + r_t) at a grid node."""
    k = int(round(t / ss.grid.dt))
    if not np.isclose(t, ss.grid.times[k], atol=1e-12 * max(1.0, ss.grid.horizon)):
        raise ValueError(f"t = {t} is not a grid node")
    return float(-(ss.B @ (riccati.eta[k] @ x + r[k])) / ss.R)


def mean_control(
    ss: StateSpace, riccati: RiccatiSolution, r: np.ndarray, xbar: np.ndarray
) -> np.ndarray:
    """Mean control trajectory Nbar(t_k) = -R^{-1} B^T (eta_k xbar_k + r_k)."""
    y = np.einsum("kij,kj->ki", riccati.eta, xbar) + r
    return -(y @ ss.B) / ss.R


def solve_mfc(ss: StateSpace) -> MeanFieldSolution:
    """Full cooperative solve: Riccati, coupled (r, xbar), s0 and cost."""
    riccati = solve_riccati(ss)
    r, xbar = solve_coupled_mfc(ss, riccati)
    s0 = compute_s0(ss, riccati, r)
    sol = MeanFieldSolution(
        kind=MFC, riccati=riccati, r=r, xbar=xbar, s0=s0, analytic_cost=np.nan,
        r_e=ss.r_e, policy=ss.policy, grid=ss.grid, params=ss.params,
    )
    cost = analytic_cost(sol, ss.params)
    return MeanFieldSolution(
        kind=MFC, riccati=riccati, r=r, xbar=xbar, s0=s0, analytic_cost=cost,
        r_e=ss.r_e, policy=ss.policy, grid=ss.grid, params=ss.params,
    )
