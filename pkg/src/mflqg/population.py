"""Finite-population simulation, cost evaluation and the small-N stacked oracle."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np

from . import noise
from .model import Model

DEFAULT_BUDGET = 4e9      # agent-path-steps per call
ORACLE_CAP = 16


class PopulationError(Exception):
    pass


class BudgetExceeded(PopulationError):
    pass


# ---------------------------------------------------------------------------
# strategies


@dataclass(frozen=True)
class StrategyProfile:
    """Affine feedback for the major agent and the minors.

    u0 = major_gain x0 + major_ff and u_i = minor_gain x_i + minor_ff (+ offsets_i).
    Feedforwards are per-path processes of shape (paths, steps+1, m) covering
    path indices [path_start, path_start + paths); ``None`` means zero.
    ``minor_gains`` optionally overrides the gain of individual agents.
    When ``open_loop`` = (u0, u) is given the controls are applied verbatim
    (u0: (paths, steps+1, m), u: (paths, steps+1, N, m)) and gains are ignored.
    """

    major_gain: np.ndarray
    minor_gain: np.ndarray
    major_ff: Optional[np.ndarray] = None
    minor_ff: Optional[np.ndarray] = None
    minor_gains: Dict[int, np.ndarray] = field(default_factory=dict)
    offsets: Optional[np.ndarray] = None
    open_loop: Optional[tuple] = None
    path_start: int = 0

    @property
    def paths(self) -> Optional[int]:
        for a in (self.major_ff, self.minor_ff, self.offsets):
            if a is not None:
                return a.shape[0]
        if self.open_loop is not None:
            return self.open_loop[0].shape[0]
        return None

    def with_offsets(self, offsets: Optional[np.ndarray]) -> "StrategyProfile":
        return StrategyProfile(self.major_gain, self.minor_gain, self.major_ff, self.minor_ff,
                               self.minor_gains, offsets, self.open_loop, self.path_start)


def feedback_profile(model: Model, major_gain=None, minor_gain=None) -> StrategyProfile:
    """Pure linear feedback without feedforward (zero gains by default)."""
    K = model.grid.steps + 1
    z = np.zeros((K, model.m, model.n))
    return StrategyProfile(z if major_gain is None else np.asarray(major_gain),
                           z if minor_gain is None else np.asarray(minor_gain))


def decentralized_profile(model: Model, pMajor, pMinor, cc_paths) -> StrategyProfile:
    """Gains (Theta1, Lambda1) and W0-driven feedforwards (Theta2, Lambda2) read
    from a sample of the consistency system."""
    return StrategyProfile(np.asarray(pMajor.gain), np.asarray(pMinor.gain),
                           cc_paths.Theta2, cc_paths.Lambda2,
                           path_start=0)


# ---------------------------------------------------------------------------
# simulation


@dataclass(frozen=True)
class PopulationRun:
    """Simulated paths of the major agent, the minor average and (optionally)
    every minor agent, with per-path costs accumulated by the trapezoid rule."""

    N: int
    seed: int
    path_start: int
    x0: np.ndarray                    # (paths, steps+1, n)
    xbar: np.ndarray                  # (paths, steps+1, n)
    J0_path: np.ndarray               # (paths,)
    Ji_path: np.ndarray               # (paths, N)
    x: Optional[np.ndarray] = None    # (paths, steps+1, N, n)
    u0: Optional[np.ndarray] = None   # (paths, steps+1, m)
    u: Optional[np.ndarray] = None    # (paths, steps+1, N, m)
    channel_map: Dict[str, str] = field(default_factory=lambda: {"W0": "channel 0", "W_i": "channel i"})

    @property
    def paths(self) -> int:
        return self.x0.shape[0]


def check_budget(N: int, paths: int, steps: int, budget: float = DEFAULT_BUDGET) -> None:
    load = float(N) * float(paths) * float(steps)
    if load > budget:
        raise BudgetExceeded(f"N*paths*steps = {load:.3g} exceeds the budget {budget:.3g}")


def population_noise(seed: int, N: int, start: int, stop: int, steps: int, dt: float):
    """(dW0, dW): shapes (paths, steps) and (paths, steps, N), channels 0 and 1..N."""
    dW0 = noise.increments(seed, 0, start, stop, steps, 1, dt)[:, :, 0]
    dW = np.empty((stop - start, steps, N))
    for i in range(N):
        dW[:, :, i] = noise.increments(seed, i + 1, start, stop, steps, 1, dt)[:, :, 0]
    return dW0, dW


def _quad(Q, v):
    """<Q v, v> for v (..., n) and a single matrix Q."""
    return np.einsum("...i,ij,...j->...", v, Q, v)


def simulate_with_noise(model: Model, profile: StrategyProfile, dW0: np.ndarray, dW: np.ndarray,
                        seed: int = 0, path_start: int = 0, mean_field: Optional[np.ndarray] = None,
                        store_agents: bool = False, store_controls: bool = False) -> PopulationRun:
    """Euler-Maruyama for the N+1 agents with given increments.

    ``mean_field`` (paths, steps+1, n) replaces the empirical average in the
    dynamics and in the costs, which yields the auxiliary limiting system.
    """
    grid = model.grid
    steps, dt, n, m = grid.steps, grid.dt, model.n, model.m
    P, _, N = dW.shape
    c = model.coef
    w = grid.trapezoid_weights()
    x0 = np.empty((P, steps + 1, n))
    xbar = np.empty((P, steps + 1, n))
    xs = np.empty((P, steps + 1, N, n)) if store_agents else None
    u0s = np.empty((P, steps + 1, m)) if store_controls else None
    us = np.empty((P, steps + 1, N, m)) if store_controls else None
    J0 = np.zeros(P)
    Ji = np.zeros((P, N))
    cur0 = np.broadcast_to(model.xi0, (P, n)).copy()
    cur = np.broadcast_to(model.xi, (P, N, n)).copy()
    gains = None
    if profile.minor_gains:
        gains = np.broadcast_to(profile.minor_gain, (N,) + profile.minor_gain.shape).copy()
        for i, g in profile.minor_gains.items():
            gains[i] = g
    ol = profile.open_loop
    for k in range(steps + 1):
        mean = cur.mean(axis=1)
        mf = mean if mean_field is None else mean_field[:, k]
        x0[:, k] = cur0
        xbar[:, k] = mean
        if store_agents:
            xs[:, k] = cur
        if ol is not None:
            u0 = ol[0][:, k]
            u = ol[1][:, k]
        else:
            u0 = cur0 @ profile.major_gain[k].T
            if profile.major_ff is not None:
                u0 = u0 + profile.major_ff[:, k]
            if gains is None:
                u = cur @ profile.minor_gain[k].T
            else:
                u = np.einsum("imn,pin->pim", gains[:, k], cur)
            if profile.minor_ff is not None:
                u = u + profile.minor_ff[:, k, None, :]
            if profile.offsets is not None:
                u = u + profile.offsets[:, k]
        if store_controls:
            u0s[:, k] = u0
            us[:, k] = u
        # costs
        e0 = cur0 - mf @ c["H0"][k].T
        J0 += 0.5 * w[k] * (_quad(c["Q0"][k], e0) + _quad(c["R0"][k], u0))
        ei = cur - (cur0 @ c["H"][k].T)[:, None, :] - (mf @ c["Hhat"][k].T)[:, None, :]
        Ji += 0.5 * w[k] * (_quad(c["Q"][k], ei) + _quad(c["R"][k], u))
        if k == steps:
            break
        dw0 = dW0[:, k, None]
        drift0 = cur0 @ c["A0"][k].T + u0 @ c["B0"][k].T + mf @ c["F0"][k].T
        diff0 = cur0 @ c["C0"][k].T + u0 @ c["D0"][k].T + mf @ c["Ftilde0"][k].T
        drift = cur @ c["A"][k].T + u @ c["B"][k].T + (mf @ c["F"][k].T)[:, None, :]
        diff = (cur @ c["C"][k].T + u @ c["D"][k].T + (mf @ c["Ftilde"][k].T)[:, None, :]
                + (cur0 @ c["Gtilde"][k].T)[:, None, :])
        cur0 = cur0 + drift0 * dt + diff0 * dw0
        cur = cur + drift * dt + diff * dW[:, k, :, None]
    return PopulationRun(N, seed, path_start, x0, xbar, J0, Ji, xs, u0s, us)


def simulate_population(model: Model, profile: StrategyProfile, N: int, paths: int, seed: int,
                        start: Optional[int] = None, budget: float = DEFAULT_BUDGET,
                        store_agents: bool = True, store_controls: bool = True,
                        mean_field: Optional[np.ndarray] = None) -> PopulationRun:
    """Simulate N minors and the major on ``paths`` keyed sample paths."""
    grid = model.grid
    if profile.major_gain.shape[0] != grid.steps + 1 or profile.minor_gain.shape[0] != grid.steps + 1:
        raise PopulationError("strategy profile grid does not match the model grid")
    if N < 1:
        raise PopulationError("N must be at least 1")
    if profile.paths is not None and profile.paths != paths:
        raise PopulationError(f"profile carries {profile.paths} paths, {paths} requested")
    check_budget(N, paths, grid.steps, budget)
    start = profile.path_start if start is None else start
    dW0, dW = population_noise(seed, N, start, start + paths, grid.steps, grid.dt)
    return simulate_with_noise(model, profile, dW0, dW, seed, start, mean_field,
                               store_agents, store_controls)


# ---------------------------------------------------------------------------
# costs


@dataclass(frozen=True)
class CostReport:
    J0: float
    Ji: np.ndarray
    Jsoc: float
    Jsoc_per_agent: float
    stderr: Dict[str, object]
    paths: int

    def to_json(self) -> str:
        return json.dumps({
            "J0": self.J0, "Ji": [float(v) for v in self.Ji], "Jsoc": self.Jsoc,
            "Jsoc_per_agent": self.Jsoc_per_agent, "paths": self.paths,
            "stderr": {k: (list(map(float, v)) if np.ndim(v) else float(v))
                       for k, v in self.stderr.items()},
        }, indent=1)


def _se(a: np.ndarray, axis=0):
    cnt = a.shape[axis]
    if cnt < 2:
        return np.zeros(a.shape[:axis] + a.shape[axis + 1:]) if a.ndim > 1 else 0.0
    return np.std(a, axis=axis, ddof=1) / np.sqrt(cnt)


def evaluate_costs(run: PopulationRun, model: Optional[Model] = None) -> CostReport:
    """Average the per-path trapezoid costs across paths."""
    soc_path = run.Ji_path.sum(axis=1)
    Ji = run.Ji_path.mean(axis=0)
    Jsoc = float(soc_path.mean())
    return CostReport(float(run.J0_path.mean()), Ji, Jsoc, Jsoc / run.N,
                      {"J0": float(_se(run.J0_path)), "Ji": _se(run.Ji_path),
                       "Jsoc": float(_se(soc_path)), "Jsoc_per_agent": float(_se(soc_path)) / run.N},
                      run.paths)


def write_trajectories_csv(path, run: PopulationRun, model: Model) -> None:
    """Rows (t, path, agent, state..., control...); agent 0 is the major."""
    if run.x is None or run.u is None:
        raise PopulationError("trajectory export needs a run with stored agents and controls")
    n, m = model.n, model.m
    t = model.grid.nodes
    header = ["t", "path", "agent"] + [f"x_{j}" for j in range(n)] + [f"u_{j}" for j in range(m)]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for p in range(run.paths):
            pid = run.path_start + p
            for k in range(t.shape[0]):
                rows = [(0, run.x0[p, k], run.u0[p, k])]
                rows += [(i + 1, run.x[p, k, i], run.u[p, k, i]) for i in range(run.N)]
                for agent, xv, uv in rows:
                    vals = [repr(float(v)) for v in xv] + [repr(float(v)) for v in uv]
                    fh.write(f"{t[k]!r},{pid},{agent}," + ",".join(vals) + "\n")


# ---------------------------------------------------------------------------
# stacked oracle


@dataclass(frozen=True)
class SocialOracle:
    """Stacked (N+1)-agent linear system with the social cost as one quadratic form.

    Matrices are node stacks. ``C[i]``/``D[i]`` multiply dW_i (i = 0 is the
    common noise). ``Q`` is obtained by summing the individual costs;
    ``Q_printed`` is the alternative block list kept for comparison.
    """

    N: int
    n: int
    m: int
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray          # (N+1, steps+1, d, d)
    D: np.ndarray          # (N+1, steps+1, d, M)
    Q: np.ndarray
    Q_printed: np.ndarray
    R: np.ndarray
    Xi: np.ndarray

    @property
    def dim(self) -> int:
        return (self.N + 1) * self.n

    def q_discrepancy(self) -> float:
        """Largest entrywise difference between the summed and the printed weight."""
        return float(np.max(np.abs(self.Q - self.Q_printed)))

    def feedback_matrices(self, profile: StrategyProfile):
        """Block-diagonal stacked gain for a profile without overrides."""
        K = self.A.shape[0]
        n, m, N = self.n, self.m, self.N
        G = np.zeros((K, (N + 1) * m, (N + 1) * n))
        G[:, :m, :n] = profile.major_gain
        for i in range(1, N + 1):
            gi = profile.minor_gains.get(i - 1, profile.minor_gain)
            G[:, i * m:(i + 1) * m, i * n:(i + 1) * n] = gi
        return G

    def simulate(self, profile: StrategyProfile, paths: int, seed: int, start: int = 0,
                 dt: Optional[float] = None, weights: Optional[np.ndarray] = None):
        """J_soc per path from the stacked SDE under a profile, with the same
        keyed increments as simulate_population. Returns (costs, states)."""
        K = self.A.shape[0]
        steps = K - 1
        if dt is None or weights is None:
            raise PopulationError("oracle simulation needs dt and trapezoid weights")
        N, n, m = self.N, self.n, self.m
        dW0, dW = population_noise(seed, N, start, start + paths, steps, dt)
        incr = np.concatenate([dW0[:, :, None], dW], axis=2)      # (P, steps, N+1)
        G = self.feedback_matrices(profile)
        x = np.broadcast_to(self.Xi, (paths, self.dim)).copy()
        cost = np.zeros(paths)
        states = np.empty((paths, K, self.dim))
        for k in range(K):
            states[:, k] = x
            if profile.open_loop is not None:
                u = np.concatenate([profile.open_loop[0][:, k],
                                    profile.open_loop[1][:, k].reshape(paths, N * m)], axis=1)
            else:
                u = x @ G[k].T
                ff = np.zeros((paths, (N + 1) * m))
                if profile.major_ff is not None:
                    ff[:, :m] = profile.major_ff[:, k]
                if profile.minor_ff is not None:
                    ff[:, m:] = np.tile(profile.minor_ff[:, k], (1, N))
                if profile.offsets is not None:
                    ff[:, m:] += profile.offsets[:, k].reshape(paths, N * m)
                u = u + ff
            cost += 0.5 * weights[k] * (_quad(self.Q[k], x) + _quad(self.R[k], u))
            if k == steps:
                break
            step = (x @ self.A[k].T + u @ self.B[k].T) * dt
            for i in range(N + 1):
                step += (x @ self.C[i, k].T + u @ self.D[i, k].T) * incr[:, k, i, None]
            x = x + step
        return cost, states


def build_social_oracle(model: Model, N: int, cap: int = ORACLE_CAP) -> SocialOracle:
    """Stack the major and N minors into one linear system with the social cost."""
    if N < 1:
        raise PopulationError("N must be at least 1")
    if N > cap:
        raise PopulationError(f"oracle population {N} exceeds the cap {cap}")
    c = model.coef
    n, m = model.n, model.m
    K = model.grid.steps + 1
    d, M = (N + 1) * n, (N + 1) * m
    A = np.zeros((K, d, d))
    B = np.zeros((K, d, M))
    C = np.zeros((N + 1, K, d, d))
    D = np.zeros((N + 1, K, d, M))
    Q = np.zeros((K, d, d))
    Qp = np.zeros((K, d, d))
    R = np.zeros((K, M, M))
    s = lambda i: slice(i * n, (i + 1) * n)
    r = lambda i: slice(i * m, (i + 1) * m)
    A[:, s(0), s(0)] = c["A0"]
    B[:, s(0), r(0)] = c["B0"]
    C[0][:, s(0), s(0)] = c["C0"]
    D[0][:, s(0), r(0)] = c["D0"]
    for j in range(1, N + 1):
        A[:, s(0), s(j)] = c["F0"] / N
        C[0][:, s(0), s(j)] = c["Ftilde0"] / N
    T = lambda a: np.swapaxes(a, 1, 2)
    Qm, Hm, Hh = c["Q"], c["H"], c["Hhat"]
    mix = T(Hh) @ Qm @ Hh - Qm @ Hh - T(Hh) @ Qm
    cross = T(Hm) @ Qm @ Hh - T(Hm) @ Qm           # x0' (.) x_j
    Q[:, s(0), s(0)] = N * T(Hm) @ Qm @ Hm
    Qp[:, s(0), s(0)] = N * Qm + mix
    for i in range(1, N + 1):
        A[:, s(i), s(i)] = c["A"]
        B[:, s(i), r(i)] = c["B"]
        R[:, r(i), r(i)] = c["R"]
        D[i][:, s(i), r(i)] = c["D"]
        C[i][:, s(i), s(0)] = c["Gtilde"]
        Q[:, s(0), s(i)] = cross
        Q[:, s(i), s(0)] = T(cross)
        Qp[:, s(0), s(i)] = -T(Hh) @ Qm @ Hm + Qm @ Hm
        Qp[:, s(i), s(0)] = -Hm @ Qm @ Hh + Hm @ Qm
        for j in range(1, N + 1):
            A[:, s(i), s(j)] += c["F"] / N
            C[i][:, s(i), s(j)] += c["Ftilde"] / N
            Q[:, s(i), s(j)] = mix / N + (Qm if i == j else 0.0)
            Qp[:, s(i), s(j)] = mix / N + (Qm if i == j else 0.0)
        C[i][:, s(i), s(i)] += c["C"]
    Xi = np.concatenate([model.xi0] + [model.xi] * N)
    return SocialOracle(N, n, m, A, B, C, D, Q, Qp, R, Xi)


# ---------------------------------------------------------------------------
# exact moments of linear Euler recursions


@dataclass
class LinearEulerSystem:
    """z_{k+1} = z_k + (Az z_k + a) dt + sum_i (Gz_i z_k + g_i) dW_i with E dW_i^2 = dt.

    Node stacks: A (K, d, d), a (K, d), G (ch, K, d, d), g (ch, K, d).
    """

    A: np.ndarray
    a: np.ndarray
    G: np.ndarray
    g: np.ndarray
    z0: np.ndarray

    def moments(self, dt: float):
        """Exact mean and second moment E[z z'] at every node."""
        K, d = self.a.shape
        mu = np.empty((K, d))
        S = np.empty((K, d, d))
        mu[0] = self.z0
        S[0] = np.outer(self.z0, self.z0)
        I = np.eye(d)
        for k in range(K - 1):
            Mk = I + dt * self.A[k]
            ck = dt * self.a[k]
            m_, s_ = mu[k], S[k]
            Msm = Mk @ np.outer(m_, ck)
            S_new = Mk @ s_ @ Mk.T + Msm + Msm.T + np.outer(ck, ck)
            for i in range(self.G.shape[0]):
                Gi, gi = self.G[i, k], self.g[i, k]
                Gmg = Gi @ np.outer(m_, gi)
                S_new += dt * (Gi @ s_ @ Gi.T + Gmg + Gmg.T + np.outer(gi, gi))
            mu[k + 1] = Mk @ m_ + ck
            S[k + 1] = 0.5 * (S_new + S_new.T)
        return mu, S


def discrete_social_optimum(oracle: SocialOracle, dt: float, weights: np.ndarray,
                            u0: Optional[np.ndarray] = None):
    """Exact minimizer of the Euler-discretized social cost over minor controls
    with a deterministic major control ``u0`` (steps+1, m), zero by default.

    Dynamic programming on the stacked discrete system; returns (gain, offset)
    with u_minor,k = gain_k x_k + offset_k, the last node control being zero.
    """
    N, n, m = oracle.N, oracle.n, oracle.m
    K = oracle.A.shape[0]
    d = oracle.dim
    Mm = N * m
    u0 = np.zeros((K, m)) if u0 is None else np.asarray(u0, dtype=float)
    I = np.eye(d)
    gain = np.zeros((K, Mm, d))
    offset = np.zeros((K, Mm))
    P = weights[-1] * oracle.Q[-1]
    p = np.zeros(d)
    ch = N + 1
    for k in range(K - 2, -1, -1):
        Phi = I + dt * oracle.A[k]
        Gam = dt * oracle.B[k][:, m:]
        b = dt * (oracle.B[k][:, :m] @ u0[k])
        Cs = [oracle.C[i, k] for i in range(ch)]
        Ds = [oracle.D[i, k][:, m:] for i in range(ch)]
        es = [oracle.D[i, k][:, :m] @ u0[k] for i in range(ch)]
        Rm = oracle.R[k][m:, m:]
        Huu = weights[k] * Rm + Gam.T @ P @ Gam + dt * sum(Di.T @ P @ Di for Di in Ds)
        Hux = Gam.T @ P @ Phi + dt * sum(Di.T @ P @ Ci for Di, Ci in zip(Ds, Cs))
        hu = Gam.T @ (P @ b + p) + dt * sum(Di.T @ P @ ei for Di, ei in zip(Ds, es))
        sol = np.linalg.solve(0.5 * (Huu + Huu.T), np.column_stack([Hux, hu]))
        gain[k] = -sol[:, :d]
        offset[k] = -sol[:, d]
        P_new = (weights[k] * oracle.Q[k] + Phi.T @ P @ Phi
                 + dt * sum(Ci.T @ P @ Ci for Ci in Cs) - Hux.T @ sol[:, :d])
        p = (Phi.T @ (P @ b + p) + dt * sum(Ci.T @ P @ ei for Ci, ei in zip(Cs, es))
             - Hux.T @ sol[:, d])
        P = 0.5 * (P_new + P_new.T)
    return gain, offset


def _sensitivity_system(oracle: SocialOracle, Ku: np.ndarray, ku: np.ndarray,
                        Lh: Optional[np.ndarray], hat: Optional[tuple], du: np.ndarray):
    """Augmented linear system (x, xhat, xi) for a base feedback u = Ku x + Lh xhat + ku
    and the open-loop sensitivity xi driven by the minor control direction du."""
    K = oracle.A.shape[0]
    d = oracle.dim
    m, N = oracle.m, oracle.N
    q = 0 if hat is None else hat[0].shape[1]
    D_ = 2 * d + q
    A = np.zeros((K, D_, D_))
    a = np.zeros((K, D_))
    ch = N + 1
    G = np.zeros((ch, K, D_, D_))
    g = np.zeros((ch, K, D_))
    xs, hs, ss = slice(0, d), slice(d, d + q), slice(d + q, D_)
    B = oracle.B
    Bm = B[:, :, m:]
    A[:, xs, xs] = oracle.A + B @ Ku
    a[:, xs] = np.einsum("kij,kj->ki", B, ku)
    if hat is not None:
        A[:, xs, hs] = B @ Lh
        A[:, hs, hs] = hat[0]
        G[0][:, hs, hs] = hat[1]
    A[:, ss, ss] = oracle.A
    a[:, ss] = np.einsum("kij,kj->ki", Bm, du)
    for i in range(ch):
        Di = oracle.D[i]
        G[i][:, xs, xs] = oracle.C[i] + Di @ Ku
        g[i][:, xs] = np.einsum("kij,kj->ki", Di, ku)
        if hat is not None:
            G[i][:, xs, hs] = Di @ Lh
        G[i][:, ss, ss] = oracle.C[i]
        g[i][:, ss] = np.einsum("kij,kj->ki", Di[:, :, m:], du)
    return A, a, G, g, (xs, hs, ss)


def moments_directional_derivative(oracle: SocialOracle, dt: float, weights: np.ndarray,
                                   Ku: np.ndarray, ku: np.ndarray, du: np.ndarray,
                                   Lh: Optional[np.ndarray] = None, hat: Optional[tuple] = None,
                                   hat0: Optional[np.ndarray] = None) -> float:
    """Infinite-path value of dJ_soc/dh along an open-loop minor perturbation.

    The base controls are u = Ku x + Lh xhat + ku, where xhat follows
    d xhat = hat[0] xhat dt + hat[1] xhat dW0. ``du`` is (steps+1, N m).
    """
    A, a, G, g, (xs, hs, ss) = _sensitivity_system(oracle, Ku, ku, Lh, hat, du)
    D_ = A.shape[1]
    z0 = np.zeros(D_)
    z0[xs] = oracle.Xi
    if hat is not None:
        z0[hs] = hat0
    mu, S = LinearEulerSystem(A, a, G, g, z0).moments(dt)
    m = oracle.m
    total = 0.0
    for k in range(A.shape[0]):
        Sxx = S[k][ss, xs]                          # E[xi x']
        Ex = mu[k][xs]
        # E[u] restricted to minors
        Eu = Ku[k] @ Ex + ku[k]
        if hat is not None:
            Eu = Eu + Lh[k] @ mu[k][hs]
        term = np.trace(oracle.Q[k] @ Sxx) + Eu[m:] @ oracle.R[k][m:, m:] @ du[k]
        total += weights[k] * term
    return float(total)


def moments_social_cost(oracle: SocialOracle, dt: float, weights: np.ndarray,
                        Ku: np.ndarray, ku: np.ndarray, Lh=None, hat=None, hat0=None) -> float:
    """Infinite-path social cost under u = Ku x + Lh xhat + ku."""
    K = oracle.A.shape[0]
    du = np.zeros((K, oracle.N * oracle.m))
    A, a, G, g, (xs, hs, ss) = _sensitivity_system(oracle, Ku, ku, Lh, hat, du)
    z0 = np.zeros(A.shape[1])
    z0[xs] = oracle.Xi
    if hat is not None:
        z0[hs] = hat0
    mu, S = LinearEulerSystem(A, a, G, g, z0).moments(dt)
    total = 0.0
    for k in range(K):
        sel = np.concatenate([np.arange(xs.start, xs.stop), np.arange(hs.start, hs.stop)])
        Kfull = np.concatenate([Ku[k], Lh[k] if hat is not None else np.zeros((Ku.shape[1], 0))], axis=1)
        Sz = S[k][np.ix_(sel, sel)]
        mz = mu[k][sel]
        Euu = Kfull @ Sz @ Kfull.T + np.outer(Kfull @ mz, ku[k]) + np.outer(ku[k], Kfull @ mz) + np.outer(ku[k], ku[k])
        Sxx = S[k][xs, xs]
        total += 0.5 * weights[k] * (np.trace(oracle.Q[k] @ Sxx) + np.trace(oracle.R[k] @ Euu))
    return float(total)


def decentralized_stacked_feedback(oracle: SocialOracle, pMajor, pMinor, field_, cc):
    """Stacked form of the decentralized profile: u = Ku x + Lh xhat with xhat the
    conditional forward state of the consistency system."""
    from .ccfield import closed_loop, feedforward_maps
    N, n, m = oracle.N, oracle.n, oracle.m
    K = oracle.A.shape[0]
    Ku = np.zeros((K, (N + 1) * m, (N + 1) * n))
    Ku[:, :m, :n] = pMajor.gain
    ff = feedforward_maps(field_, cc)
    Lh = np.zeros((K, (N + 1) * m, 2 * n))
    Lh[:, :m] = ff["theta"]
    for i in range(1, N + 1):
        Ku[:, i * m:(i + 1) * m, i * n:(i + 1) * n] = pMinor.gain
        Lh[:, i * m:(i + 1) * m] = ff["lam"]
    cl = closed_loop(field_, cc)
    return Ku, Lh, (cl["Acond"], cl["C0cond"]), cc.x0


def normalize_direction(du: np.ndarray, weights: np.ndarray, N: int) -> np.ndarray:
    """Scale a deterministic (steps+1, N m) direction so that sum_j int |du_j|^2 = N."""
    norm2 = float(np.sum(weights[:, None] * du ** 2))
    if norm2 == 0:
        return du
    return du * np.sqrt(N / norm2)


def frechet_gap(model: Model, oracle: SocialOracle, base: StrategyProfile, direction: np.ndarray,
                h: float = 1e-4, paths: int = 1000, seed: int = 0, start: int = 0,
                per_agent: bool = True) -> float:
    """Central difference of the social cost along an open-loop minor perturbation.

    The base profile is simulated once and every control is recorded; the
    perturbed runs apply the recorded controls plus or minus h*direction as
    open-loop processes on the same increments. ``direction`` is
    (steps+1, N, m) or (paths, steps+1, N, m). The derivative is divided by N
    when ``per_agent`` is set.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    N = oracle.N
    if not np.any(direction):
        return 0.0
    base_run = simulate_population(model, base, N, paths, seed, start=start)
    d = np.broadcast_to(direction, (paths,) + tuple(np.shape(direction)[-3:]))
    vals = []
    for sgn in (1.0, -1.0):
        prof = StrategyProfile(base.major_gain, base.minor_gain,
                               open_loop=(base_run.u0, base_run.u + sgn * h * d), path_start=start)
        run = simulate_population(model, prof, N, paths, seed, start=start,
                                  store_agents=False, store_controls=False)
        vals.append(run.Ji_path.sum(axis=1).mean())
    gap = (vals[0] - vals[1]) / (2 * h)
    return float(gap / N if per_agent else gap)
