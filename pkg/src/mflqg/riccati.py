"""Backward RK4 sweeps and the two Riccati equations with their gains."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .model import Model, TimeGrid, hermite_half, write_paths_csv


class RiccatiError(Exception):
    """Singular weighting matrix or blow-up during a backward sweep."""


def backward_rk4(rhs: Callable[[int, np.ndarray], np.ndarray], terminal: np.ndarray,
                 grid: TimeGrid, post: Optional[Callable[[np.ndarray], np.ndarray]] = None) -> np.ndarray:
    """Classical RK4 from t=T down to t=0.

    ``rhs(j, y)`` returns dy/dt at half-grid index j (even j are nodes, odd j
    midpoints). ``post`` is applied to every accepted value (e.g. symmetrize).
    """
    steps, dt = grid.steps, grid.dt
    y = np.array(terminal, dtype=float)
    out = np.empty((steps + 1,) + y.shape)
    out[steps] = y
    half = 0.5 * dt
    for k in range(steps - 1, -1, -1):
        j = 2 * k
        k1 = rhs(j + 2, y)
        k2 = rhs(j + 1, y - half * k1)
        k3 = rhs(j + 1, y - half * k2)
        k4 = rhs(j, y - dt * k3)
        y = y - (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post is not None:
            y = post(y)
        if not np.all(np.isfinite(y)):
            raise RiccatiError(f"non-finite values in backward sweep at node {k}")
        out[k] = y
    return out


def integrate_linear_matrix_ode(rhs: Callable[[int, np.ndarray], np.ndarray], terminal: np.ndarray,
                                grid: TimeGrid) -> np.ndarray:
    """Backward RK4 for a linear matrix ODE dY/dt = L(t)[Y] with Y(T) given."""
    return backward_rk4(rhs, terminal, grid)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def weighted_inverse_factor(R: np.ndarray, D: np.ndarray, P: np.ndarray, where: str):
    """Cholesky factor of R + D'PD; raises RiccatiError if not positive definite."""
    W = R + D.T @ P @ D
    try:
        return cho_factor(_sym(W), lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        raise RiccatiError(f"R + D'PD not positive definite at {where}") from None


def riccati_rhs(P, A, B, C, D, Q, R, where="?"):
    """dP/dt for  P' + PA + A'P + C'PC + Q - (PB + C'PD) W^{-1} (B'P + D'PC) = 0."""
    fac = weighted_inverse_factor(R, D, P, where)
    S = B.T @ P + D.T @ P @ C          # m x n
    return -(P @ A + A.T @ P + C.T @ P @ C + Q - S.T @ cho_solve(fac, S, check_finite=False))


def feedback_gain(P, B, C, D, R):
    """(gain, W^{-1}) with gain = -W^{-1}(B'P + D'PC), W = R + D'PD."""
    fac = weighted_inverse_factor(R, D, P, "gain evaluation")
    S = B.T @ P + D.T @ P @ C
    gain = -cho_solve(fac, S, check_finite=False)
    w_inv = cho_solve(fac, np.eye(R.shape[0]), check_finite=False)
    return gain, _sym(w_inv)


@dataclass(frozen=True)
class RiccatiSolution:
    """P on the grid, the feedback gain -W^{-1}(B'P + D'PC) and W^{-1}.

    ``P_half`` holds P at nodes and midpoints (cubic Hermite midpoints).
    """

    which: str
    grid: TimeGrid
    P: np.ndarray
    gain: np.ndarray
    rInv: np.ndarray
    P_half: np.ndarray
    Pdot: np.ndarray

    def to_csv(self, path) -> None:
        write_paths_csv(path, self.grid, {"P": self.P, "gain": self.gain})


def _matrices(model: Model, which: str) -> Dict[str, np.ndarray]:
    if which == "major":
        names = dict(A="A0", B="B0", C="C0", D="D0", Q="Q0", R="R0")
    else:
        names = dict(A="A", B="B", C="C", D="D", Q="Q", R="R")
    return {k: model.half(v) for k, v in names.items()}


def _solve(model: Model, which: str) -> RiccatiSolution:
    mats = _matrices(model, which)
    grid = model.grid
    A, B, C, D, Q, R = (mats[k] for k in "ABCDQR")

    def rhs(j, P):
        return riccati_rhs(P, A[j], B[j], C[j], D[j], Q[j], R[j], where=f"half-grid index {j}")

    P = backward_rk4(rhs, np.zeros((model.n, model.n)), grid, post=_sym)
    steps = grid.steps
    gains = np.empty((steps + 1, model.m, model.n))
    rinv = np.empty((steps + 1, model.m, model.m))
    pdot = np.empty_like(P)
    for k in range(steps + 1):
        j = 2 * k
        try:
            gains[k], rinv[k] = feedback_gain(P[k], B[j], C[j], D[j], R[j])
        except RiccatiError:
            raise RiccatiError(f"R + D'PD not positive definite at node {k}") from None
        pdot[k] = rhs(j, P[k])
    P_half = hermite_half(P, pdot, grid.dt)
    for arr in (P, gains, rinv, P_half, pdot):
        arr.setflags(write=False)
    return RiccatiSolution(which, grid, P, gains, rinv, P_half, pdot)


def solve_major_riccati(model: Model) -> RiccatiSolution:
    """Major-agent Riccati equation with P0(T) = 0, gain Theta1."""
    return _solve(model, "major")


def solve_minor_riccati(model: Model) -> RiccatiSolution:
    """Minor-agent Riccati equation with P(T) = 0, gain Lambda1."""
    return _solve(model, "minor")
