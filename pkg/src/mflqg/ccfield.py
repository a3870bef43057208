"""Consistency-condition system: stacked assembly, decoupling field, Picard
solver, contraction constants and path sampling.

Forward state X = (z0, z); backward state Y = (y0, y1, y2, phi, varphi);
Z1 collects the common-noise integrands (beta0, beta1_0, beta2, zeta, eta)
and Z2 the idiosyncratic integrand, whose only nonzero block is beta1_1.
The system reads

    dX = [A1 X + A1bar Xh + B1 Y + F1 Z1] dt
         + [C10 X + C10bar Xh + D10 Y + F10 Z1] dW0
         + [C11 X + C11bar Xh + D11 Y + F11 Z1] dW1
    dY = [A2 X + A2bar Xh + B2 Y + B2bar Yh + C2 Z1 + C2bar Z1h
          + E2 Z2 + E2bar Z2h] dt + Z1 dW0 + Z2 dW1

where h marks conditional expectation given the common noise. The backward
variables are represented as Y = K1 X + K2 Xh, Z1 = M1 X + M2 Xh,
Z2 = N1 X + N2 Xh.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import noise
from .model import Model, TimeGrid, hermite_half, write_paths_csv
from .riccati import RiccatiError, RiccatiSolution, backward_rk4

# block indices inside X and Y
Z0, ZM = 0, 1
Y0, Y1, Y2, PHI, VPHI = 0, 1, 2, 3, 4

FORWARD_BLOCKS = ("A1", "A1bar", "B1", "F1", "C10", "C10bar", "D10", "F10",
                  "C11", "C11bar", "D11", "F11")
BACKWARD_BLOCKS = ("A2", "A2bar", "B2", "B2bar", "C2", "C2bar", "E2", "E2bar")
COUPLING_BLOCKS = ("B1", "F1", "D10", "F10", "D11", "F11", "A2", "A2bar")
BLOCK_SHAPES = {
    "A1": (2, 2), "A1bar": (2, 2), "B1": (2, 5), "F1": (2, 5),
    "C10": (2, 2), "C10bar": (2, 2), "D10": (2, 5), "F10": (2, 5),
    "C11": (2, 2), "C11bar": (2, 2), "D11": (2, 5), "F11": (2, 5),
    "A2": (5, 2), "A2bar": (5, 2), "B2": (5, 5), "B2bar": (5, 5),
    "C2": (5, 5), "C2bar": (5, 5), "E2": (5, 5), "E2bar": (5, 5),
}


class CCError(Exception):
    """Failure while assembling or solving the consistency system."""


class SingularSolveError(CCError):
    pass


class PicardDivergence(CCError):
    def __init__(self, message, last_factor, iterations):
        super().__init__(message)
        self.last_factor = last_factor
        self.iterations = iterations


@dataclass(frozen=True)
class StackedCC:
    """Block matrices of the stacked system on the half grid.

    ``blocks[name]`` has shape (2*steps+1, rows, cols); even indices are grid
    nodes, odd indices midpoints. ``aux`` keeps the Riccati quantities needed
    to rebuild the feedforward terms.
    """

    grid: TimeGrid
    n: int
    blocks: Dict[str, np.ndarray]
    x0: np.ndarray
    include_eta: bool = False
    aux: Dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __getattr__(self, name):
        blocks = self.__dict__.get("blocks")
        if blocks is not None and name in blocks:
            return blocks[name]
        raise AttributeError(name)

    def node(self, name: str) -> np.ndarray:
        return self.blocks[name][0::2]

    def block(self, name: str, row: int, col: int, j: Optional[int] = None) -> np.ndarray:
        """n x n sub-block (row, col) of a stacked matrix, at half index j or all."""
        n = self.n
        a = self.blocks[name]
        sub = a[:, row * n:(row + 1) * n, col * n:(col + 1) * n]
        return sub if j is None else sub[j]

    @classmethod
    def from_blocks(cls, grid: TimeGrid, n: int, x0=None, **given) -> "StackedCC":
        """Build directly from (possibly constant) matrices; missing blocks are zero."""
        H = 2 * grid.steps + 1
        blocks = {}
        for name, (r, c) in BLOCK_SHAPES.items():
            shape = (r * n, c * n)
            if name in given:
                a = np.asarray(given.pop(name), dtype=float)
                if a.shape == shape:
                    a = np.broadcast_to(a, (H,) + shape).copy()
                elif a.shape != (H,) + shape:
                    raise CCError(f"{name}: expected {shape} or {(H,) + shape}, got {a.shape}")
            else:
                a = np.zeros((H,) + shape)
            blocks[name] = a
        if given:
            raise CCError(f"unknown blocks {sorted(given)}")
        x0 = np.zeros(2 * n) if x0 is None else np.asarray(x0, dtype=float)
        return cls(grid, n, blocks, x0)

    def scaled(self, c: float) -> "StackedCC":
        """Copy with every forward/backward coupling block multiplied by c."""
        blocks = dict(self.blocks)
        for name in COUPLING_BLOCKS:
            blocks[name] = c * blocks[name]
        return StackedCC(self.grid, self.n, blocks, self.x0, self.include_eta, self.aux)


def _put(dst, row, col, val, n):
    dst[:, row * n:(row + 1) * n, col * n:(col + 1) * n] += val


def _T(a):
    return np.swapaxes(a, -1, -2)


def assemble_stacked(model: Model, pMajor: RiccatiSolution, pMinor: RiccatiSolution,
                     include_eta: bool = False) -> StackedCC:
    """Populate every block of the stacked system from the model and the two
    Riccati solutions.

    ``include_eta=True`` adds the common-noise integrand of the minor
    feedforward equation to the minor control (and hence to the forward
    drift, the idiosyncratic diffusion and the feedforward drift).
    """
    grid = model.grid
    for sol in (pMajor, pMinor):
        if sol.grid != grid:
            raise CCError("Riccati solution grid does not match the model grid")
    n, m = model.n, model.m
    H = 2 * grid.steps + 1
    h = {k: model.half(k) for k in model.coef}
    A0, B0, C0, D0, F0, Ft0, Q0, H0, R0 = (h[k] for k in ("A0", "B0", "C0", "D0", "F0", "Ftilde0", "Q0", "H0", "R0"))
    A, B, C, D, F, Ft, Gt, Q, Hm, Hh, R = (h[k] for k in ("A", "B", "C", "D", "F", "Ftilde", "Gtilde", "Q", "H", "Hhat", "R"))
    P0 = pMajor.P_half
    P = pMinor.P_half
    I = np.broadcast_to(np.eye(n), (H, n, n))

    W0 = R0 + _T(D0) @ P0 @ D0
    W = R + _T(D) @ P @ D
    try:
        W0inv = np.linalg.inv(W0)
        Winv = np.linalg.inv(W)
    except np.linalg.LinAlgError:
        raise CCError("singular R + D'PD on the half grid") from None
    W0inv = 0.5 * (W0inv + _T(W0inv))
    Winv = 0.5 * (Winv + _T(Winv))
    S0 = _T(B0) @ P0 + _T(D0) @ P0 @ C0      # m x n
    S = _T(B) @ P + _T(D) @ P @ C
    Theta1 = -W0inv @ S0
    Lambda1 = -Winv @ S
    G0 = _T(S0) @ W0inv                        # (P0B0 + C0'P0D0) W0^{-1}
    G = _T(S) @ Winv
    Ch0 = _T(C0) - G0 @ _T(D0)                 # C0' - G0 D0'
    Ch = _T(C) - G @ _T(D)

    blk = {name: np.zeros((H, r * n, c * n)) for name, (r, c) in BLOCK_SHAPES.items()}
    # forward drift
    _put(blk["A1"], Z0, Z0, A0 + B0 @ Theta1, n)
    _put(blk["A1"], ZM, Z0, -B @ Winv @ _T(D) @ P @ Gt, n)
    _put(blk["A1"], ZM, ZM, A + B @ Lambda1, n)
    _put(blk["A1bar"], Z0, ZM, F0 - B0 @ W0inv @ _T(D0) @ P0 @ Ft0, n)
    _put(blk["A1bar"], ZM, ZM, F - B @ Winv @ _T(D) @ P @ Ft, n)
    _put(blk["B1"], Z0, PHI, -B0 @ W0inv @ _T(B0), n)
    _put(blk["B1"], ZM, VPHI, -B @ Winv @ _T(B), n)
    _put(blk["F1"], Z0, PHI, -B0 @ W0inv @ _T(D0), n)
    # common-noise diffusion
    _put(blk["C10"], Z0, Z0, C0 + D0 @ Theta1, n)
    _put(blk["C10bar"], Z0, ZM, Ft0 - D0 @ W0inv @ _T(D0) @ P0 @ Ft0, n)
    _put(blk["D10"], Z0, PHI, -D0 @ W0inv @ _T(B0), n)
    _put(blk["F10"], Z0, PHI, -D0 @ W0inv @ _T(D0), n)
    # idiosyncratic diffusion
    _put(blk["C11"], ZM, Z0, Gt - D @ Winv @ _T(D) @ P @ Gt, n)
    _put(blk["C11"], ZM, ZM, C + D @ Lambda1, n)
    _put(blk["C11bar"], ZM, ZM, Ft - D @ Winv @ _T(D) @ P @ Ft, n)
    _put(blk["D11"], ZM, VPHI, -D @ Winv @ _T(B), n)
    if include_eta:
        _put(blk["F1"], ZM, VPHI, -B @ Winv @ _T(D), n)
        _put(blk["F11"], ZM, VPHI, -D @ Winv @ _T(D), n)

    # backward drift
    HQH = _T(Hm) @ Q @ Hm
    IHh = I - Hh
    _put(blk["A2"], Y0, Z0, -HQH, n)
    _put(blk["A2bar"], Y0, ZM, _T(Hm) @ Q @ IHh, n)
    _put(blk["B2"], Y0, Y0, -_T(A0), n)
    _put(blk["C2"], Y0, Y0, -_T(C0), n)
    _put(blk["E2bar"], Y0, Y1, -_T(Gt), n)

    _put(blk["A2"], Y1, Z0, Q @ Hm, n)
    _put(blk["A2"], Y1, ZM, -Q, n)
    _put(blk["A2bar"], Y1, ZM, Q @ Hh, n)
    _put(blk["B2"], Y1, Y1, -_T(A), n)
    _put(blk["E2"], Y1, Y1, -_T(C), n)

    _put(blk["A2"], Y2, Z0, -_T(Hh) @ Q @ Hm, n)
    _put(blk["A2bar"], Y2, ZM, _T(Hh) @ Q @ IHh, n)
    _put(blk["B2"], Y2, Y0, -_T(F0), n)
    _put(blk["B2"], Y2, Y2, -_T(A + F), n)
    _put(blk["B2bar"], Y2, Y1, -_T(F), n)
    _put(blk["C2"], Y2, Y0, -_T(Ft0), n)
    _put(blk["E2bar"], Y2, Y1, -_T(Ft), n)

    _put(blk["A2bar"], PHI, ZM, -(Ch0 @ P0 @ Ft0 + P0 @ F0 - Q0 @ H0), n)
    _put(blk["B2"], PHI, PHI, -_T(A0) + G0 @ _T(B0), n)
    _put(blk["C2"], PHI, PHI, -Ch0, n)

    # minor feedforward row, with the linear term S substituted
    _put(blk["A2"], VPHI, Z0, -Ch @ P @ Gt + Q @ Hm - _T(Hh) @ Q @ Hm, n)
    _put(blk["A2bar"], VPHI, ZM, -Ch @ P @ Ft - P @ F + Q @ Hh + _T(Hh) @ Q @ IHh, n)
    _put(blk["B2"], VPHI, VPHI, -_T(A) + G @ _T(B), n)
    _put(blk["B2"], VPHI, Y0, -_T(F0), n)
    _put(blk["B2"], VPHI, Y2, -_T(F), n)
    _put(blk["B2bar"], VPHI, Y1, -_T(F), n)
    _put(blk["C2"], VPHI, Y0, -_T(Ft0), n)
    _put(blk["E2bar"], VPHI, Y1, -_T(Ft), n)
    if include_eta:
        _put(blk["C2"], VPHI, VPHI, -Ch, n)

    for a in blk.values():
        a.setflags(write=False)
    aux = dict(P0=P0, P=P, W0inv=W0inv, Winv=Winv, Theta1=Theta1, Lambda1=Lambda1)
    aux.update({k: h[k] for k in ("B0", "D0", "Ftilde0", "B", "D", "Ftilde", "Gtilde",
                                  "Q", "H", "Hhat", "F", "F0")})
    x0 = np.concatenate([model.xi0, model.xi])
    return StackedCC(grid, n, blk, x0, include_eta, aux)


# ---------------------------------------------------------------------------
# decoupling field

@dataclass(frozen=True)
class DecouplingField:
    """Affine representation of the backward variables on the grid.

    Node arrays K1, K2, M1, M2, N1, N2, Kcond (each 5n x 2n); ``half`` holds
    the same fields on nodes and midpoints. ``Kcond`` comes from the
    conditional equations and must match K1 + K2.
    """

    grid: TimeGrid
    K1: np.ndarray
    K2: np.ndarray
    M1: np.ndarray
    M2: np.ndarray
    N1: np.ndarray
    N2: np.ndarray
    Kcond: np.ndarray
    half: Dict[str, np.ndarray] = field(repr=False)
    method: str = "decoupling"
    nonsingular: bool = True
    max_condition: float = 1.0
    residual: float = float("nan")
    kcond_gap: float = float("nan")
    flags: List[str] = field(default_factory=list)
    log: List[dict] = field(default_factory=list)

    @property
    def Mc(self):
        return self.M1 + self.M2

    @property
    def Nc(self):
        return self.N1 + self.N2

    def to_csv(self, prefix) -> List[str]:
        names = []
        for key in ("K1", "K2", "M1", "M2", "N1", "N2", "Kcond"):
            path = f"{prefix}_{key}.csv"
            write_paths_csv(path, self.grid, {key: getattr(self, key)})
            names.append(path)
        return names

    def sup_distance(self, other: "DecouplingField") -> float:
        """Largest entrywise difference over nodes, across K1, K2, M1, M2, N1, N2."""
        return float(max(np.max(np.abs(getattr(self, k) - getattr(other, k)))
                         for k in ("K1", "K2", "M1", "M2", "N1", "N2")))


def _solve(Amat, rhs, where, cond_limit=1e12, check=False):
    if check:
        c = np.linalg.cond(Amat)
        if not np.isfinite(c) or c > cond_limit:
            raise SingularSolveError(f"ill-conditioned algebraic solve at {where} (condition {c:.3g})")
    try:
        return np.linalg.solve(Amat, rhs)
    except np.linalg.LinAlgError:
        raise SingularSolveError(f"singular algebraic solve at {where}") from None


class _Matcher:
    """Drift and diffusion matching identities for the affine ansatz."""

    def __init__(self, cc: StackedCC):
        self.b = cc.blocks
        b = self.b
        self.q = b["A2"].shape[1]
        self.Iq = np.eye(self.q)
        self.A1s = b["A1"] + b["A1bar"]
        self.C10s = b["C10"] + b["C10bar"]
        self.C11s = b["C11"] + b["C11bar"]
        self.A2s = b["A2"] + b["A2bar"]
        self.B2s = b["B2"] + b["B2bar"]
        self.C2s = b["C2"] + b["C2bar"]
        self.E2s = b["E2"] + b["E2bar"]

    def diffusion(self, j, K1, K2, check=False):
        """Solve the integrand identities for given K1, K2 at half index j."""
        b = self.b
        F10 = b["F10"][j]
        Kc = K1 + K2
        L1 = self.Iq - K1 @ F10
        M1 = _solve(L1, K1 @ (b["C10"][j] + b["D10"][j] @ K1), f"half index {j}", check=check)
        rhs2 = K1 @ (b["C10bar"][j] + b["D10"][j] @ K2) + K2 @ (self.C10s[j] + b["D10"][j] @ Kc) + K2 @ F10 @ M1
        M2 = _solve(self.Iq - Kc @ F10, rhs2, f"half index {j}", check=check)
        N1 = K1 @ (b["C11"][j] + b["D11"][j] @ K1 + b["F11"][j] @ M1)
        N2 = K1 @ (b["C11bar"][j] + b["D11"][j] @ K2 + b["F11"][j] @ M2)
        return M1, M2, N1, N2

    def conditional_diffusion(self, j, Kc, K1, check=False):
        b = self.b
        Mc = _solve(self.Iq - Kc @ b["F10"][j], Kc @ (self.C10s[j] + b["D10"][j] @ Kc),
                    f"half index {j}", check=check)
        Nc = K1 @ (self.C11s[j] + b["D11"][j] @ Kc + b["F11"][j] @ Mc)
        return Mc, Nc

    def drift(self, j, K1, K2, M1, M2, N1, N2):
        b = self.b
        Kc, Mc, Nc = K1 + K2, M1 + M2, N1 + N2
        dK1 = (b["A2"][j] + b["B2"][j] @ K1 + b["C2"][j] @ M1 + b["E2"][j] @ N1
               - K1 @ (b["A1"][j] + b["B1"][j] @ K1 + b["F1"][j] @ M1))
        dK2 = (b["A2bar"][j] + b["B2"][j] @ K2 + b["B2bar"][j] @ Kc + b["C2"][j] @ M2
               + b["C2bar"][j] @ Mc + b["E2"][j] @ N2 + b["E2bar"][j] @ Nc
               - K1 @ (b["A1bar"][j] + b["B1"][j] @ K2 + b["F1"][j] @ M2)
               - K2 @ (self.A1s[j] + b["B1"][j] @ Kc + b["F1"][j] @ Mc))
        return dK1, dK2

    def conditional_drift(self, j, Kc, Mc, Nc):
        b = self.b
        return (self.A2s[j] + self.B2s[j] @ Kc + self.C2s[j] @ Mc + self.E2s[j] @ Nc
                - Kc @ (self.A1s[j] + b["B1"][j] @ Kc + b["F1"][j] @ Mc))


def _fd_derivative(y: np.ndarray, dt: float) -> np.ndarray:
    """Fourth-order finite differences along axis 0 (needs >= 5 nodes)."""
    d = np.empty_like(y)
    d[2:-2] = (-y[4:] + 8 * y[3:-1] - 8 * y[1:-3] + y[:-4]) / (12 * dt)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * dt)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * dt)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * dt)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * dt)
    return d


def _field_from_nodes(cc, mt, K1, K2, Kc, dK1, dK2, dKc, method, extra=None):
    grid = cc.grid
    steps = grid.steps
    hK1 = hermite_half(K1, dK1, grid.dt)
    hK2 = hermite_half(K2, dK2, grid.dt)
    hKc = hermite_half(Kc, dKc, grid.dt)
    H = 2 * steps + 1
    q, p = K1.shape[1:]
    hM = {k: np.empty((H, q, p)) for k in ("M1", "M2", "N1", "N2")}
    for j in range(H):
        M1, M2, N1, N2 = mt.diffusion(j, hK1[j], hK2[j])
        hM["M1"][j], hM["M2"][j], hM["N1"][j], hM["N2"][j] = M1, M2, N1, N2
    half = dict(K1=hK1, K2=hK2, Kcond=hKc, **hM)
    kw = dict(extra or {})
    return DecouplingField(grid, K1, K2, hM["M1"][0::2].copy(), hM["M2"][0::2].copy(),
                           hM["N1"][0::2].copy(), hM["N2"][0::2].copy(), Kc, half,
                           method=method, **kw)


def matching_residual(cc: StackedCC, K1, K2, M1, M2, N1, N2) -> float:
    """Largest nodewise spectral norm of the drift/diffusion matching defects.

    Time derivatives are taken by fourth-order finite differences of the
    stored node values.
    """
    mt = _Matcher(cc)
    b = cc.blocks
    dt = cc.grid.dt
    dK1_fd = _fd_derivative(K1, dt)
    dK2_fd = _fd_derivative(K2, dt)
    worst = 0.0
    for k in range(K1.shape[0]):
        j = 2 * k
        dK1, dK2 = mt.drift(j, K1[k], K2[k], M1[k], M2[k], N1[k], N2[k])
        Kc, Mc = K1[k] + K2[k], M1[k] + M2[k]
        # integrand identities written without inverses
        r1 = M1[k] - K1[k] @ (b["C10"][j] + b["D10"][j] @ K1[k] + b["F10"][j] @ M1[k])
        r2 = M2[k] - (K1[k] @ (b["C10bar"][j] + b["D10"][j] @ K2[k] + b["F10"][j] @ M2[k])
                      + K2[k] @ (mt.C10s[j] + b["D10"][j] @ Kc + b["F10"][j] @ Mc))
        r3 = N1[k] - K1[k] @ (b["C11"][j] + b["D11"][j] @ K1[k] + b["F11"][j] @ M1[k])
        r4 = N2[k] - K1[k] @ (b["C11bar"][j] + b["D11"][j] @ K2[k] + b["F11"][j] @ M2[k])
        for r in (dK1_fd[k] - dK1, dK2_fd[k] - dK2, r1, r2, r3, r4):
            worst = max(worst, float(np.linalg.norm(r, 2)))
    return worst


def solve_cc_decoupling(cc: StackedCC, model: Optional[Model] = None,
                        residual_tol: float = 1e-8) -> DecouplingField:
    """Backward RK4 for (K1, K2) together with the conditional field Kcond.

    The integrand coefficients M1, M2, N1, N2 are recovered by dense linear
    solves at every stage. A residual above ``residual_tol`` is flagged.
    """
    grid = cc.grid
    mt = _Matcher(cc)
    q = cc.blocks["A2"].shape[1]
    p = cc.blocks["A2"].shape[2]

    def rhs(j, Y):
        K1, K2, Kc = Y[0], Y[1], Y[2]
        M1, M2, N1, N2 = mt.diffusion(j, K1, K2)
        dK1, dK2 = mt.drift(j, K1, K2, M1, M2, N1, N2)
        Mc, Nc = mt.conditional_diffusion(j, Kc, K1)
        dKc = mt.conditional_drift(j, Kc, Mc, Nc)
        return np.stack([dK1, dK2, dKc])

    sol = backward_rk4(rhs, np.zeros((3, q, p)), grid)
    K1, K2, Kc = sol[:, 0].copy(), sol[:, 1].copy(), sol[:, 2].copy()
    # node derivatives, conditioning checks
    max_cond = 1.0
    dK = np.empty_like(sol)
    for k in range(grid.steps + 1):
        j = 2 * k
        for Kmat in (K1[k], Kc[k]):
            c = float(np.linalg.cond(np.eye(q) - Kmat @ cc.blocks["F10"][j]))
            if not np.isfinite(c) or c > 1e12:
                raise SingularSolveError(f"ill-conditioned algebraic solve at node {k} (condition {c:.3g})")
            max_cond = max(max_cond, c)
        dK[k] = rhs(j, sol[k])
    field_ = _field_from_nodes(cc, mt, K1, K2, Kc, dK[:, 0], dK[:, 1], dK[:, 2], "decoupling",
                               dict(max_condition=max_cond))
    res = matching_residual(cc, field_.K1, field_.K2, field_.M1, field_.M2, field_.N1, field_.N2)
    gap = float(np.max(np.abs(Kc - (K1 + K2))))
    flags = []
    if res > residual_tol:
        flags.append(f"matching residual {res:.3g} above {residual_tol:.1g}")
    if gap > residual_tol:
        flags.append(f"conditional field differs from K1+K2 by {gap:.3g}")
    object.__setattr__(field_, "residual", res)
    object.__setattr__(field_, "kcond_gap", gap)
    object.__setattr__(field_, "flags", flags)
    return field_


# ---------------------------------------------------------------------------
# Picard iteration

def _frozen_coefficients(cc: StackedCC, half: Dict[str, np.ndarray]):
    """Closed forward coefficients for a given affine representation (half grid)."""
    b = cc.blocks
    K1, K2, M1, M2 = half["K1"], half["K2"], half["M1"], half["M2"]
    out = {
        "Ax": b["A1"] + b["B1"] @ K1 + b["F1"] @ M1,
        "Ah": b["A1bar"] + b["B1"] @ K2 + b["F1"] @ M2,
        "C0x": b["C10"] + b["D10"] @ K1 + b["F10"] @ M1,
        "C0h": b["C10bar"] + b["D10"] @ K2 + b["F10"] @ M2,
        "C1x": b["C11"] + b["D11"] @ K1 + b["F11"] @ M1,
        "C1h": b["C11bar"] + b["D11"] @ K2 + b["F11"] @ M2,
    }
    return out


def _picard_step(cc: StackedCC, fr: Dict[str, np.ndarray]):
    """Solve the linear backward equation driven by a closed forward equation."""
    b = cc.blocks
    grid = cc.grid
    q, p = b["A2"].shape[1:]
    Ax, Ah, C0x, C0h, C1x, C1h = (fr[k] for k in ("Ax", "Ah", "C0x", "C0h", "C1x", "C1h"))
    As = Ax + Ah
    C0s = C0x + C0h
    A2, A2bar, B2, B2bar = b["A2"], b["A2bar"], b["B2"], b["B2bar"]
    C2, C2bar, E2, E2bar = b["C2"], b["C2bar"], b["E2"], b["E2bar"]
    B2s = B2 + B2bar
    C2s = C2 + C2bar

    # stacked operands so that every right-hand side costs a handful of products
    left1 = np.concatenate([B2, C2, E2], axis=2)
    left2 = np.concatenate([B2s, B2bar, C2s, C2, C2bar, E2, E2bar], axis=2)
    right1 = np.concatenate([C0x, C1x, Ax, C0h, C0x + C0h, C1h, C1x + C1h, Ah], axis=2)
    right2 = np.concatenate([C0s, As], axis=2)
    stack1 = np.empty((3 * q, p))
    stack2 = np.empty((7 * q, p))

    def rhs(j, Y):
        K1, K2 = Y[0], Y[1]
        r1 = K1 @ right1[j]
        r2 = K2 @ right2[j]
        P = p
        s1 = stack1
        s1[:q] = K1
        s1[q:2 * q] = r1[:, :P]
        s1[2 * q:] = r1[:, P:2 * P]
        stack2[:q] = K2
        stack2[q:2 * q] = K1
        stack2[2 * q:3 * q] = r2[:, :P]
        stack2[3 * q:4 * q] = r1[:, 3 * P:4 * P]
        stack2[4 * q:5 * q] = r1[:, 4 * P:5 * P]
        stack2[5 * q:6 * q] = r1[:, 5 * P:6 * P]
        stack2[6 * q:] = r1[:, 6 * P:7 * P]
        out = np.empty((2, q, p))
        out[0] = A2[j] + left1[j] @ s1 - r1[:, 2 * P:3 * P]
        out[1] = A2bar[j] + left2[j] @ stack2 - r1[:, 7 * P:] - r2[:, P:]
        return out

    sol = backward_rk4(rhs, np.zeros((2, q, p)), grid)
    dsol = np.stack([rhs(2 * k, sol[k]) for k in range(grid.steps + 1)])
    hK1 = hermite_half(sol[:, 0], dsol[:, 0], grid.dt)
    hK2 = hermite_half(sol[:, 1], dsol[:, 1], grid.dt)
    M1 = hK1 @ C0x
    M2 = hK1 @ C0h + hK2 @ C0s
    N1 = hK1 @ C1x
    N2 = hK1 @ C1h
    return dict(K1=hK1, K2=hK2, M1=M1, M2=M2, N1=N1, N2=N2), dsol


def solve_cc_picard(cc: StackedCC, tol: float = 1e-10, max_iter: int = 200,
                    rho: float = 0.0):
    """Fixed-point iteration on the affine representation.

    Each sweep closes the forward equation with the current representation
    and solves the resulting linear backward equation exactly (RK4), which
    yields the next representation. The change is measured in the sup norm
    over nodes, weighted by exp(rho t). Returns (field, log).
    """
    grid = cc.grid
    q, p = cc.blocks["A2"].shape[1:]
    H = 2 * grid.steps + 1
    zeros = np.zeros((H, q, p))
    cur = dict(K1=zeros, K2=zeros, M1=zeros, M2=zeros, N1=zeros, N2=zeros)
    weight = np.exp(rho * grid.nodes)[:, None, None]
    log = []
    prev_change = None
    factor = float("nan")
    dsol = None
    for it in range(1, max_iter + 1):
        fr = _frozen_coefficients(cc, cur)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                new, dsol = _picard_step(cc, fr)
        except RiccatiError:
            log.append({"iteration": it, "change": float("inf"), "factor": float("inf")})
            raise PicardDivergence(f"Picard sweep {it} blew up in the backward integration",
                                   float("inf") if np.isnan(factor) else factor, log) from None
        change = 0.0
        for key in ("K1", "K2", "M1", "M2", "N1", "N2"):
            diff = weight * (new[key][0::2] - cur[key][0::2])
            change = max(change, float(np.max(np.abs(diff))))
        if prev_change is not None and prev_change > 0:
            factor = change / prev_change
        log.append({"iteration": it, "change": change, "factor": factor})
        cur = new
        if not np.isfinite(change) or change > 1e12:
            raise PicardDivergence(f"Picard iteration diverged at sweep {it}", factor, log)
        if change < tol:
            break
        prev_change = change
    else:
        raise PicardDivergence(
            f"Picard iteration did not reach tol {tol:g} in {max_iter} sweeps "
            f"(last change {change:.3g}, factor {factor:.3g})", factor, log)
    nodes = {k: v[0::2].copy() for k, v in cur.items()}
    Kc = nodes["K1"] + nodes["K2"]
    field_ = DecouplingField(grid, nodes["K1"], nodes["K2"], nodes["M1"], nodes["M2"],
                             nodes["N1"], nodes["N2"], Kc,
                             dict(cur, Kcond=cur["K1"] + cur["K2"]), method="picard", log=log)
    res = matching_residual(cc, field_.K1, field_.K2, field_.M1, field_.M2, field_.N1, field_.N2)
    object.__setattr__(field_, "residual", res)
    object.__setattr__(field_, "kcond_gap", 0.0)
    return field_, log


def picard_rate(log: Sequence[dict]) -> float:
    """Typical per-sweep contraction factor: median over the recorded sweeps."""
    # the last sweeps sit at round-off level; ignore them
    vals = [r["factor"] for r in log[1:] if np.isfinite(r["factor"]) and r["change"] > 1e-13]
    return float(np.median(vals)) if vals else 0.0


# ---------------------------------------------------------------------------
# contraction constants

@dataclass(frozen=True)
class ContractionReport:
    rho1: float
    rho2: float
    k: List[float]
    rho_bar1: float
    rho_bar2: float
    h3_lhs: float
    h3_rhs: float
    h3_holds: bool
    picard_rate: Optional[float] = None

    def as_dict(self) -> dict:
        d = {"rho1": self.rho1, "rho2": self.rho2, "rho_bar1": self.rho_bar1,
             "rho_bar2": self.rho_bar2, "h3_lhs": self.h3_lhs, "h3_rhs": self.h3_rhs,
             "h3_holds": self.h3_holds, "picard_rate": self.picard_rate}
        d.update({f"k{i + 1}": v for i, v in enumerate(self.k)})
        return d


def _gridmax_norm(a: np.ndarray) -> float:
    a = a[0::2]
    if not np.any(a):
        return 0.0
    return float(np.max(np.linalg.norm(a, 2, axis=(1, 2))))


def _gridmax_sym_eig(a: np.ndarray) -> float:
    a = a[0::2]
    return float(np.max(np.linalg.eigvalsh(0.5 * (a + _T(a)))[:, -1]))


def contraction_report(cc: StackedCC, rho: float = 0.0, l: Sequence[float] = (1, 1, 1, 1, 1, 1),
                       picard_rate: Optional[float] = None) -> ContractionReport:
    """Monotonicity and Lipschitz constants of the stacked coefficients.

    Norms are spectral, maximized over grid nodes. The drift's dependence on
    the integrands counts both noise channels, so k7 and k8 are the norms of
    [C2 | E2] and [C2bar | E2bar].
    """
    l = [float(v) for v in l]
    if len(l) != 6 or min(l) <= 0:
        raise ValueError("l must be six positive numbers")
    b = cc.blocks
    rho1 = _gridmax_sym_eig(b["A1"])
    rho2 = _gridmax_sym_eig(b["B2"])
    k = [
        _gridmax_norm(b["A1bar"]),
        _gridmax_norm(b["B1"]),
        _gridmax_norm(b["F1"]),
        _gridmax_norm(b["A2"]),
        _gridmax_norm(b["A2bar"]),
        _gridmax_norm(b["B2bar"]),
        _gridmax_norm(np.concatenate([b["C2"], b["E2"]], axis=2)),
        _gridmax_norm(np.concatenate([b["C2bar"], b["E2bar"]], axis=2)),
        _gridmax_norm(b["C10"]),
        _gridmax_norm(b["C10bar"]),
        _gridmax_norm(b["D10"]),
        _gridmax_norm(b["F10"]),
    ]
    k1, k2, k3, k4, k5, k6, k7, k8, k9, k10 = k[:10]
    rb1 = rho - 2 * rho1 - 2 * k1 - k2 / l[0] - k3 / l[1] - k9 ** 2 - k10 ** 2
    rb2 = -rho - 2 * rho2 - 2 * k6 - k4 / l[2] - k5 / l[3] - k7 / l[4] - k8 / l[5]
    lhs = 2 * rho1 + 2 * rho2
    rhs = -2 * k1 - 2 * k6 - 2 * k7 ** 2 - 2 * k8 ** 2 - k9 ** 2 - k10 ** 2
    return ContractionReport(rho1, rho2, k, rb1, rb2, lhs, rhs, bool(lhs < rhs), picard_rate)


# ---------------------------------------------------------------------------
# feedforward maps and path sampling

def closed_loop(field_: DecouplingField, cc: StackedCC) -> Dict[str, np.ndarray]:
    """Forward coefficients (node values) once Y, Z are replaced by the field."""
    b = {k: v[0::2] for k, v in cc.blocks.items()}
    K1, K2, M1, M2 = field_.K1, field_.K2, field_.M1, field_.M2
    out = {
        "Ax": b["A1"] + b["B1"] @ K1 + b["F1"] @ M1,
        "Ah": b["A1bar"] + b["B1"] @ K2 + b["F1"] @ M2,
        "C0x": b["C10"] + b["D10"] @ K1 + b["F10"] @ M1,
        "C0h": b["C10bar"] + b["D10"] @ K2 + b["F10"] @ M2,
        "C1x": b["C11"] + b["D11"] @ K1 + b["F11"] @ M1,
        "C1h": b["C11bar"] + b["D11"] @ K2 + b["F11"] @ M2,
    }
    out["Acond"] = out["Ax"] + out["Ah"]
    out["C0cond"] = out["C0x"] + out["C0h"]
    return out


def feedforward_maps(field_: DecouplingField, cc: StackedCC) -> Dict[str, np.ndarray]:
    """Node matrices theta, lam, s with Theta2 = theta Xh, Lambda2 = lam Xh,
    S = s Xh, all linear in the conditional forward state Xh = (z0, zhat)."""
    n = cc.n
    a = {k: v[0::2] for k, v in cc.aux.items()}
    Kc = field_.K1 + field_.K2
    Mc = field_.Mc
    Nc = field_.Nc
    rows = lambda M, r: M[:, r * n:(r + 1) * n, :]
    Ez0 = np.zeros((n, 2 * n)); Ez0[:, :n] = np.eye(n)
    Ez = np.zeros((n, 2 * n)); Ez[:, n:] = np.eye(n)
    T = _T
    phi, zeta = rows(Kc, PHI), rows(Mc, PHI)
    vphi, eta = rows(Kc, VPHI), rows(Mc, VPHI)
    theta = -a["W0inv"] @ (T(a["B0"]) @ phi + T(a["D0"]) @ zeta
                           + T(a["D0"]) @ a["P0"] @ a["Ftilde0"] @ Ez)
    lam_in = T(a["B"]) @ vphi + T(a["D"]) @ a["P"] @ (a["Ftilde"] @ Ez + a["Gtilde"] @ Ez0)
    if cc.include_eta:
        lam_in = lam_in + T(a["D"]) @ eta
    lam = -a["Winv"] @ lam_in
    Q, Hm, Hh, F, F0, Ft, Ft0 = (a[k] for k in ("Q", "H", "Hhat", "F", "F0", "Ftilde", "Ftilde0"))
    I = np.eye(n)
    s = (Q @ Hh @ Ez + Q @ Hm @ Ez0 + T(Hh) @ Q @ ((I - Hh) @ Ez - Hm @ Ez0)
         - T(F) @ rows(Kc, Y2) - T(F) @ rows(Kc, Y1) - T(Ft) @ rows(Nc, Y1)
         - T(F0) @ rows(Kc, Y0) - T(Ft0) @ rows(Mc, Y0))
    return {"theta": theta, "lam": lam, "s": s}


@dataclass(frozen=True)
class CCPaths:
    """Sampled solution of the consistency system on a batch of paths.

    Arrays are indexed (path, node, component). The idiosyncratic noise is
    channel ``w1_channel`` of the keyed stream.
    """

    grid: TimeGrid
    X: np.ndarray
    Xhat: np.ndarray
    Y: np.ndarray
    Z1: np.ndarray
    Z2: np.ndarray
    Theta2: np.ndarray
    Lambda2: np.ndarray
    S: np.ndarray
    dW0: np.ndarray
    dW1: np.ndarray
    seed: int
    w1_channel: int
    n: int

    @property
    def z0(self):
        return self.X[:, :, :self.n]

    @property
    def z(self):
        return self.X[:, :, self.n:]

    @property
    def zhat(self):
        return self.Xhat[:, :, self.n:]

    def to_csv(self, path) -> None:
        nodes = self.grid.nodes
        cols = {"X": self.X, "Xhat": self.Xhat, "Y": self.Y, "Theta2": self.Theta2,
                "Lambda2": self.Lambda2, "S": self.S}
        header = ["path", "t"] + [f"{k}_{i}" for k, v in cols.items() for i in range(v.shape[2])]
        with open(path, "w") as fh:
            fh.write(",".join(header) + "\n")
            for p in range(self.X.shape[0]):
                for k, t in enumerate(nodes):
                    vals = [repr(float(v)) for arr in cols.values() for v in arr[p, k]]
                    fh.write(f"{p},{t!r}," + ",".join(vals) + "\n")


def simulate_forward(cl: Dict[str, np.ndarray], x0: np.ndarray, dW0: np.ndarray,
                     dW1: Optional[np.ndarray], dt: float):
    """Euler-Maruyama for X and Xh. dW0: (paths, steps); dW1: (paths, steps) or None."""
    P, steps = dW0.shape
    p = x0.shape[0]
    X = np.empty((P, steps + 1, p))
    Xh = np.empty((P, steps + 1, p))
    X[:, 0] = x0
    Xh[:, 0] = x0
    for k in range(steps):
        x, xh = X[:, k], Xh[:, k]
        w0 = dW0[:, k, None]
        drift = x @ cl["Ax"][k].T + xh @ cl["Ah"][k].T
        s0 = x @ cl["C0x"][k].T + xh @ cl["C0h"][k].T
        X[:, k + 1] = x + drift * dt + s0 * w0
        if dW1 is not None:
            s1 = x @ cl["C1x"][k].T + xh @ cl["C1h"][k].T
            X[:, k + 1] += s1 * dW1[:, k, None]
        Xh[:, k + 1] = xh + (xh @ cl["Acond"][k].T) * dt + (xh @ cl["C0cond"][k].T) * w0
    return X, Xh


def sample_cc_paths(field_: DecouplingField, cc: StackedCC, model: Optional[Model] = None,
                    paths: int = 1, seed: int = 0, w1_channel: int = 1, start: int = 0) -> CCPaths:
    """Simulate the closed consistency system and read off every process."""
    grid = cc.grid
    steps, dt = grid.steps, grid.dt
    cl = closed_loop(field_, cc)
    ff = feedforward_maps(field_, cc)
    dW0 = noise.increments(seed, 0, start, start + paths, steps, 1, dt)[:, :, 0]
    dW1 = noise.increments(seed, w1_channel, start, start + paths, steps, 1, dt)[:, :, 0]
    X, Xh = simulate_forward(cl, cc.x0, dW0, dW1, dt)
    ein = lambda M, v: np.einsum("kij,pkj->pki", M, v)
    Y = ein(field_.K1, X) + ein(field_.K2, Xh)
    Z1 = ein(field_.M1, X) + ein(field_.M2, Xh)
    Z2 = ein(field_.N1, X) + ein(field_.N2, Xh)
    return CCPaths(grid, X, Xh, Y, Z1, Z2, ein(ff["theta"], Xh), ein(ff["lam"], Xh),
                   ein(ff["s"], Xh), dW0, dW1, seed, w1_channel, cc.n)


def conditional_copies(field_: DecouplingField, cc: StackedCC, copies: int, seed: int,
                       path: int = 0, chunk: int = 2000):
    """Average z over i.i.d. idiosyncratic copies that share one common-noise path.

    Copy c uses channel c + 1 of the keyed stream at path index ``path``.
    Returns (zhat, mean, stderr), each of shape (nodes, n).
    """
    grid = cc.grid
    steps, dt, n = grid.steps, grid.dt, cc.n
    cl = closed_loop(field_, cc)
    dW0 = noise.increments(seed, 0, path, path + 1, steps, 1, dt)[:, :, 0]
    total = np.zeros((steps + 1, n))
    total_sq = np.zeros((steps + 1, n))
    zhat = None
    for c0 in range(0, copies, chunk):
        cs = range(c0 + 1, min(copies, c0 + chunk) + 1)
        dW1 = np.stack([noise.increments(seed, c, path, path + 1, steps, 1, dt)[0, :, 0] for c in cs])
        X, Xh = simulate_forward(cl, cc.x0, np.repeat(dW0, len(cs), axis=0), dW1, dt)
        z = X[:, :, n:]
        total += z.sum(axis=0)
        total_sq += (z ** 2).sum(axis=0)
        zhat = Xh[0, :, n:]
    mean = total / copies
    var = np.maximum(total_sq / copies - mean ** 2, 0.0) * copies / max(copies - 1, 1)
    return zhat, mean, np.sqrt(var / copies)
