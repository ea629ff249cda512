"""Dense small-matrix linear algebra, ODE stepping and quadrature.

Everything in here is domain-agnostic: uniform time grids, pivoted linear
solves, a classical fixed-step RK4 integrator for backward-in-time problems,
composite trapezoidal quadrature and a PSD diagnostic used by the Riccati
solver. All functions are pure and all returned arrays are freshly allocated,
so values can be shared freely between concurrent tasks.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sparse
import scipy.sparse.linalg as sparsela


class SingularMatrix(Exception):
    """A pivot collapsed (or the residual bound failed) in a direct solve."""


class NonFinite(Exception):
    """An intermediate value left the finite floating-point range."""


class NotPSD(Exception):
    """A matrix expected to be positive semidefinite has a negative eigenvalue."""


#: residual bound guaranteed by solve_linear: ||Ax - b||_inf / (1 + ||b||_inf)
SOLVE_RESIDUAL_BOUND = 1e-10

#: a pivot below this fraction of the largest row magnitude is treated as zero
PIVOT_TOLERANCE = 1e-14


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [0, horizon] with ``n_steps + 1`` nodes.

    The last node is pinned to ``horizon`` exactly (linspace, not accumulated
    steps), so terminal conditions are imposed at the true horizon.
    """

    horizon: float
    n_steps: int

    def __post_init__(self):
        if self.n_steps < 2:
            raise ValueError(f"n_steps must be >= 2, got {self.n_steps}")
        if not (self.horizon > 0 and np.isfinite(self.horizon)):
            raise ValueError(f"horizon must be positive and finite, got {self.horizon}")

    @property
    def dt(self) -> float:
        return self.horizon / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.horizon, self.n_steps + 1)

    def refined(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.horizon, self.n_steps * factor)


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFinite(f"{what} contains non-finite entries")


def solve_linear(system_matrix: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` by pivoted LU factorization.

    Raises SingularMatrix when a pivot falls below PIVOT_TOLERANCE times the
    largest row magnitude, or when the computed solution violates the
    normalized residual bound (badly conditioned system).
    """
    a = np.asarray(system_matrix, dtype=float)
    b = np.asarray(rhs, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"system matrix must be square, got shape {a.shape}")
    _require_finite(a, "system matrix")
    _require_finite(b, "right-hand side")

    lu, piv = sla.lu_factor(a, check_finite=False)
    scale = np.max(np.abs(a))
    min_pivot = np.min(np.abs(np.diag(lu)))
    if min_pivot <= PIVOT_TOLERANCE * max(scale, 1e-300):
        raise SingularMatrix(
            f"pivot {min_pivot:.3e} below {PIVOT_TOLERANCE:.0e} * {scale:.3e}"
        )
    x = sla.lu_solve((lu, piv), b, check_finite=False)

    residual = np.max(np.abs(a @ x - b)) / (1.0 + np.max(np.abs(b)))
    if not residual <= SOLVE_RESIDUAL_BOUND:
        raise SingularMatrix(
            f"normalized residual {residual:.3e} exceeds {SOLVE_RESIDUAL_BOUND:.0e}; "
            "system is too ill-conditioned"
        )
    return x


def solve_sparse(system_matrix: sparse.spmatrix, rhs: np.ndarray) -> np.ndarray:
    """Direct sparse LU solve with the same residual contract as solve_linear.

    Used for the block two-point boundary systems whose bandwidth makes a
    dense factorization needlessly expensive.
    """
    a = system_matrix.tocsc()
    b = np.asarray(rhs, dtype=float)
    _require_finite(b, "right-hand side")
    x = sparsela.spsolve(a, b)
    _require_finite(x, "sparse solve result")
    residual = np.max(np.abs(a @ x - b)) / (1.0 + np.max(np.abs(b)))
    if not residual <= SOLVE_RESIDUAL_BOUND:
        raise SingularMatrix(
            f"normalized residual {residual:.3e} exceeds {SOLVE_RESIDUAL_BOUND:.0e}"
        )
    return x


def rk4_backward(
    terminal_value: np.ndarray | float,
    derivative_field: Callable[[float, np.ndarray], np.ndarray],
    grid: TimeGrid,
) -> np.ndarray:
    """Integrate ``dy/dt = f(t, y)`` backward from t = horizon to t = 0.

    Classical 4th-order Runge-Kutta with the fixed step of ``grid``. Returns
    an array of shape ``(n_nodes, *shape(y))`` with index k holding the value
    at node t_k (so index -1 is the terminal value).

    Raises NonFinite as soon as any intermediate state leaves the finite
    range, which on Riccati problems signals blow-up inside the horizon.
    """
    y = np.array(terminal_value, dtype=float, copy=True)
    _require_finite(y, "terminal value")
    times = grid.times
    h = -grid.dt
    out = np.empty((grid.n_nodes,) + y.shape)
    out[-1] = y
    for k in range(grid.n_steps, 0, -1):
        t = times[k]
        k1 = derivative_field(t, y)
        k2 = derivative_field(t + h / 2.0, y + (h / 2.0) * k1)
        k3 = derivative_field(t + h / 2.0, y + (h / 2.0) * k2)
        k4 = derivative_field(t + h, y + h * k3)
        y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFinite(f"integration left the finite range at t = {times[k - 1]:g}")
        out[k - 1] = y
    return out


def trapezoid(values: np.ndarray, grid: TimeGrid) -> float | np.ndarray:
    """Composite trapezoidal rule over [0, horizon]; one value per node."""
    v = np.asarray(values, dtype=float)
    if v.shape[0] != grid.n_nodes:
        raise ValueError(f"expected {grid.n_nodes} node values, got {v.shape[0]}")
    return np.trapezoid(v, dx=grid.dt, axis=0)


def symmetrize_and_check_psd(
    matrix: np.ndarray, tol: float
) -> tuple[np.ndarray, float]:
    """Return ``(M + M^T) / 2`` and its smallest eigenvalue.

    Raises NotPSD when the smallest eigenvalue of the symmetrized matrix is
    below ``-tol``.
    """
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    sym = 0.5 * (m + m.T)
    _require_finite(sym, "symmetrized matrix")
    min_eig = float(np.linalg.eigvalsh(sym)[0])
    if min_eig < -tol:
        raise NotPSD(f"smallest eigenvalue {min_eig:.3e} below -{tol:.0e}")
    return sym, min_eig
