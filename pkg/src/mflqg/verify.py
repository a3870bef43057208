"""Large-population experiments: convergence sweeps, slope fits, the adjoint
representation of the minor adjoint process and the BSDE averaging estimate."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import noise
from .ccfield import (StackedCC, DecouplingField, assemble_stacked, closed_loop, sample_cc_paths,
                      simulate_forward, solve_cc_decoupling, _fd_derivative, _frozen_coefficients,
                      Y1, ZM, Z0)
from .model import Model, hermite_half, write_paths_csv
from .population import (StrategyProfile, check_budget, decentralized_profile, population_noise,
                         simulate_with_noise, DEFAULT_BUDGET)
from .riccati import backward_rk4, solve_major_riccati, solve_minor_riccati

FUNCTIONALS = ("lemma2", "lemma3", "lemma4", "major_gap", "social_gap")


class VerifyError(Exception):
    pass


@dataclass(frozen=True)
class ConvergenceTable:
    functional: str
    rows: List[tuple]      # (N, paths, estimate, stderr)
    note: str = ""
    per_path: Optional[Dict[int, np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        Ns = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(Ns, Ns[1:])):
            raise VerifyError("population sizes must be strictly increasing")

    @property
    def Ns(self) -> np.ndarray:
        return np.array([r[0] for r in self.rows], dtype=float)

    @property
    def estimates(self) -> np.ndarray:
        return np.array([r[2] for r in self.rows], dtype=float)

    @property
    def stderrs(self) -> np.ndarray:
        return np.array([r[3] for r in self.rows], dtype=float)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("functional,N,paths,estimate,stderr\n")
            for N, P, est, se in self.rows:
                fh.write(f"{self.functional},{N},{P},{est!r},{se!r}\n")

    def as_dict(self) -> dict:
        return {"functional": self.functional, "note": self.note,
                "rows": [{"N": int(N), "paths": int(P), "estimate": float(e), "stderr": float(s)}
                         for N, P, e, s in self.rows]}


@dataclass(frozen=True)
class SlopeFit:
    slope: float
    intercept: float
    r2: float

    def as_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2}


def fit_slope(table: ConvergenceTable) -> SlopeFit:
    """Least-squares line through (log N, log estimate)."""
    if len(table.rows) < 3:
        raise VerifyError("a slope fit needs at least three rows")
    for N, _, est, _ in table.rows:
        if not est > 0:
            raise VerifyError(f"{table.functional}: nonpositive estimate {est!r} at N={N}")
    x = np.log(table.Ns)
    y = np.log(table.estimates)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return SlopeFit(float(slope), float(intercept), r2)


# ---------------------------------------------------------------------------
# limiting solution bundle


@dataclass(frozen=True)
class Decentralized:
    """Riccati solutions, stacked system and decoupling field for one model."""

    model: Model
    pMajor: object
    pMinor: object
    cc: StackedCC
    field: DecouplingField

    def sample(self, seed: int, start: int, stop: int):
        """(profile, cc paths) for path indices [start, stop)."""
        cp = sample_cc_paths(self.field, self.cc, self.model, paths=stop - start, seed=seed, start=start)
        prof = decentralized_profile(self.model, self.pMajor, self.pMinor, cp)
        prof = StrategyProfile(prof.major_gain, prof.minor_gain, prof.major_ff, prof.minor_ff,
                               path_start=start)
        return prof, cp


def prepare(model: Model, include_eta: bool = False) -> Decentralized:
    p0 = solve_major_riccati(model)
    p = solve_minor_riccati(model)
    cc = assemble_stacked(model, p0, p, include_eta=include_eta)
    return Decentralized(model, p0, p, cc, solve_cc_decoupling(cc))


def _default_family(grid) -> List[np.ndarray]:
    t = grid.nodes / grid.T
    return [np.ones_like(t), np.cos(np.pi * t), np.sin(np.pi * t)]


# ---------------------------------------------------------------------------
# sweeps


def _sup_sq(a: np.ndarray) -> np.ndarray:
    """max over nodes of the squared Euclidean norm, per leading index."""
    return np.max(np.sum(a ** 2, axis=-1), axis=1)


def sweep_population(model: Model, builder: Decentralized, Ns: Sequence[int], paths: int, seed: int,
                     functional: str, chunk: int = 250, budget: float = DEFAULT_BUDGET,
                     family: Optional[List[np.ndarray]] = None) -> ConvergenceTable:
    """Estimate one functional for every N with common random numbers.

    The common noise and the first N idiosyncratic channels are the same for
    every population size; paths are processed in fixed chunks and reduced in
    path order.
    """
    if functional not in FUNCTIONALS:
        raise VerifyError(f"unknown functional {functional!r}; expected one of {FUNCTIONALS}")
    Ns = [int(v) for v in Ns]
    if any(b <= a for a, b in zip(Ns, Ns[1:])):
        raise VerifyError("Ns must be strictly increasing")
    grid = model.grid
    steps, dt = grid.steps, grid.dt
    for N in Ns:
        check_budget(N, paths, steps, budget)
    Nmax = Ns[-1]
    w = grid.trapezoid_weights()
    family = _default_family(grid) if family is None else family
    per_path: Dict[int, List[np.ndarray]] = {N: [] for N in Ns}
    sums: Dict[int, list] = {N: [] for N in Ns}
    for start in range(0, paths, chunk):
        stop = min(paths, start + chunk)
        prof, cp = builder.sample(seed, start, stop)
        dW0, dWall = population_noise(seed, Nmax, start, stop, steps, dt)
        zhat = cp.zhat
        for N in Ns:
            dW = dWall[:, :, :N]
            if functional == "lemma2":
                run = simulate_with_noise(model, prof, dW0, dW, seed, start)
                per_path[N].append(_sup_sq(run.xbar - zhat))
            elif functional == "lemma4":
                run = simulate_with_noise(model, prof, dW0, dW, seed, start)
                per_path[N].append(_sup_sq(run.x0 - cp.z0))
            elif functional == "lemma3":
                run = simulate_with_noise(model, prof, dW0, dW, seed, start, store_agents=True)
                aux = simulate_with_noise(model, prof, dW0, dW, seed, start, mean_field=zhat,
                                          store_agents=True)
                diff = np.sum((run.x - aux.x) ** 2, axis=-1)       # (P, K, N)
                per_path[N].append(np.max(diff, axis=1))           # (P, N)
            elif functional == "major_gap":
                run = simulate_with_noise(model, prof, dW0, dW, seed, start)
                aux = simulate_with_noise(model, prof, dW0, dW, seed, start, mean_field=zhat)
                per_path[N].append(run.J0_path - aux.J0_path)
            else:
                run = simulate_with_noise(model, prof, dW0, dW, seed, start, store_controls=True)
                base = run.Ji_path.sum(axis=1)
                rows = [base]
                for d in family:
                    dn = d / np.sqrt(np.sum(w * d ** 2))           # unit norm per agent
                    off = np.broadcast_to(dn[None, :, None, None], run.u.shape)
                    for sgn in (1.0, -1.0):
                        pr = StrategyProfile(prof.major_gain, prof.minor_gain,
                                             open_loop=(run.u0, run.u + sgn * off), path_start=start)
                        rows.append(simulate_with_noise(model, pr, dW0, dW, seed, start).Ji_path.sum(axis=1))
                per_path[N].append(np.stack(rows, axis=1))
    out = []
    note = ""
    for N in Ns:
        vals = np.concatenate(per_path[N], axis=0)
        P = vals.shape[0]
        if functional in ("lemma2", "lemma4"):
            est, se = vals.mean(), vals.std(ddof=1) / np.sqrt(P)
        elif functional == "lemma3":
            means = vals.mean(axis=0)
            i = int(np.argmax(means))
            est, se = means[i], vals[:, i].std(ddof=1) / np.sqrt(P)
        elif functional == "major_gap":
            est, se = abs(vals.mean()), vals.std(ddof=1) / np.sqrt(P)
        else:
            note = ("improvement over the best member of a fixed family of symmetric open-loop "
                    "perturbations; an upper-bound surrogate for the social gap")
            base = vals[:, 0]
            best, best_se = 0.0, 0.0
            for f in range(len(family)):
                jp, jm = vals[:, 1 + 2 * f], vals[:, 2 + 2 * f]
                g_path = 0.5 * (jp - jm)
                c_path = jp + jm - 2 * base           # equals the second derivative
                g, c = g_path.mean(), c_path.mean()
                if c > 0:
                    imp = g * g / (2 * c) / N
                    se_ = abs(g) / c * g_path.std(ddof=1) / np.sqrt(P) / N
                    if imp > best:
                        best, best_se = imp, se_
            est, se = best, best_se
        out.append((N, P, float(est), float(se)))
    kept = {N: np.concatenate(per_path[N], axis=0) for N in Ns}
    return ConvergenceTable(functional, out, note, kept)


# ---------------------------------------------------------------------------
# adjoint representation


@dataclass(frozen=True)
class AdjointRepresentation:
    """y1 = Gamma0 z0 + Gamma1 z + Gamma2 zhat and beta1 = Gamma1 sigma1(z).

    ``L1``/``L2`` are the coefficient rows acting on X = (z0, z) and
    Xh = (z0, zhat); the Gammas are read off them.
    """

    grid: object
    Gamma0: np.ndarray
    Gamma1: np.ndarray
    Gamma2: np.ndarray
    L1: np.ndarray
    L2: np.ndarray
    residual: float
    flags: List[str] = field(default_factory=list)

    def to_csv(self, path) -> None:
        write_paths_csv(path, self.grid, {"Gamma0": self.Gamma0, "Gamma1": self.Gamma1,
                                          "Gamma2": self.Gamma2})

    def field_discrepancy(self, field_: DecouplingField, n: int) -> float:
        """Largest difference against the y1 rows of a decoupling field."""
        r = slice(n, 2 * n)
        G1 = field_.K1[:, r, n:]
        G0 = (field_.K1 + field_.K2)[:, r, :n]
        G2 = field_.K2[:, r, n:]
        return float(max(np.max(np.abs(G1 - self.Gamma1)), np.max(np.abs(G0 - self.Gamma0)),
                         np.max(np.abs(G2 - self.Gamma2))))


def adjoint_representation(model: Model, field_: DecouplingField, cc: StackedCC,
                           residual_tol: float = 1e-8) -> AdjointRepresentation:
    """Linear backward equations for the coefficients of y1.

    With the forward state closed by the field, the y1 equation only involves
    y1 itself and its own dW1 integrand, so matching coefficients gives

        L1' = a2 - A'L1 - C'L1 C1x - L1 Ax
        L2' = a2bar - A'L2 - C'L1 C1h - L1 Ah - L2 (Ax + Ah)

    with a2, a2bar the y1 rows of the source blocks.
    """
    n = cc.n
    grid = cc.grid
    rows = slice(Y1 * n, (Y1 + 1) * n)
    b = cc.blocks
    fr = _frozen_coefficients(cc, field_.half)
    Ax, Ah, C1x, C1h = fr["Ax"], fr["Ah"], fr["C1x"], fr["C1h"]
    As = Ax + Ah
    a2 = b["A2"][:, rows, :]
    a2bar = b["A2bar"][:, rows, :]
    # drift of y1 in its own variables: -A' y1 - C' beta1
    By = b["B2"][:, rows, rows]
    Ey = b["E2"][:, rows, rows]

    def rhs(j, Y):
        L1, L2 = Y[0], Y[1]
        d1 = a2[j] + By[j] @ L1 + Ey[j] @ L1 @ C1x[j] - L1 @ Ax[j]
        d2 = a2bar[j] + By[j] @ L2 + Ey[j] @ L1 @ C1h[j] - L1 @ Ah[j] - L2 @ As[j]
        return np.stack([d1, d2])

    sol = backward_rk4(rhs, np.zeros((2, n, 2 * n)), grid)
    L1, L2 = sol[:, 0].copy(), sol[:, 1].copy()
    dL = np.stack([rhs(2 * k, sol[k]) for k in range(grid.steps + 1)])
    fd1 = _fd_derivative(L1, grid.dt)
    fd2 = _fd_derivative(L2, grid.dt)
    res = float(max(np.max(np.linalg.norm(fd1 - dL[:, 0], 2, axis=(1, 2))),
                    np.max(np.linalg.norm(fd2 - dL[:, 1], 2, axis=(1, 2)))))
    flags = [] if res <= residual_tol else [f"representation residual {res:.3g} above {residual_tol:.1g}"]
    G0 = L1[:, :, :n] + L2[:, :, :n]
    G1 = L1[:, :, n:]
    G2 = L2[:, :, n:]
    return AdjointRepresentation(grid, G0, G1, G2, L1, L2, res, flags)


def representation_paths(rep: AdjointRepresentation, cp) -> np.ndarray:
    """y1 on sampled paths via the representation, shape (paths, nodes, n)."""
    e = lambda M, v: np.einsum("kij,pkj->pki", M, v)
    return e(rep.Gamma0, cp.z0) + e(rep.Gamma1, cp.z) + e(rep.Gamma2, cp.zhat)


def estimate_h4(model: Model, rep: AdjointRepresentation, bundle: Decentralized, Ns: Sequence[int],
                paths: int, seed: int, budget: float = DEFAULT_BUDGET, chunk: int = 100):
    """Averaging error of the minor adjoint across i.i.d. limiting copies.

    For every common-noise path, copies j = 1..N of the limiting minor state
    (channels 1..N) are simulated; the estimates are
    E int |E[y1^1|W0] - (1/N) sum_{j>1} y1^j|^2 dt and the same for beta1.
    Returns the two tables ("h4_y", "h4_z"); the N-scaled values are in the
    tables' notes.
    """
    grid = model.grid
    steps, dt, n = grid.steps, grid.dt, model.n
    Ns = [int(v) for v in Ns]
    for N in Ns:
        check_budget(N, paths, steps, budget)
    Nmax = Ns[-1]
    cl = closed_loop(bundle.field, bundle.cc)
    w = grid.trapezoid_weights()
    zr = slice(n, 2 * n)
    C1x_z, C1h_z = cl["C1x"][:, zr, :], cl["C1h"][:, zr, :]
    Cs_z = C1x_z + C1h_z
    G0, G1, G2 = rep.Gamma0, rep.Gamma1, rep.Gamma2
    e = lambda M, v: np.einsum("kij,...kj->...ki", M, v)
    vals_y = {N: [] for N in Ns}
    vals_b = {N: [] for N in Ns}
    x0 = bundle.cc.x0
    for start in range(0, paths, chunk):
        stop = min(paths, start + chunk)
        P = stop - start
        dW0 = noise.increments(seed, 0, start, stop, steps, 1, dt)[:, :, 0]
        dW1 = np.stack([noise.increments(seed, j, start, stop, steps, 1, dt)[:, :, 0]
                        for j in range(1, Nmax + 1)], axis=1)             # (P, Nmax, steps)
        X, Xh = simulate_forward(cl, x0, np.repeat(dW0, Nmax, axis=0),
                                 dW1.reshape(P * Nmax, steps), dt)
        X = X.reshape(P, Nmax, steps + 1, 2 * n)
        Xh = Xh.reshape(P, Nmax, steps + 1, 2 * n)[:, 0]
        z0, zhat = Xh[:, :, :n], Xh[:, :, n:]
        z = X[:, :, :, n:]
        cond_y = e(G0, z0) + e(G1 + G2, zhat)                 # E[y1|W0]
        cond_b = e(G1, e(Cs_z, Xh))                           # E[beta1|W0]
        y_j = e(G0, z0)[:, None] + e(G1, z) + e(G2, zhat)[:, None]
        b_j = e(G1, e(C1x_z, X) + e(C1h_z, Xh)[:, None])
        for N in Ns:
            avg_y = y_j[:, 1:N].sum(axis=1) / N
            avg_b = b_j[:, 1:N].sum(axis=1) / N
            vals_y[N].append(np.sum(w * np.sum((cond_y - avg_y) ** 2, axis=-1), axis=1))
            vals_b[N].append(np.sum(w * np.sum((cond_b - avg_b) ** 2, axis=-1), axis=1))
    tables = []
    for name, vals in (("h4_y", vals_y), ("h4_z", vals_b)):
        rows = []
        for N in Ns:
            v = np.concatenate(vals[N])
            rows.append((N, v.shape[0], float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.shape[0]))))
        scaled = ", ".join(f"N={N}: {N * r[2]:.6g}" for N, r in zip(Ns, rows))
        tables.append(ConvergenceTable(name, rows, note=f"N * estimate: {scaled}"))
    return tables[0], tables[1]


def plateau_ratio(table: ConvergenceTable) -> float:
    """max / min of N * estimate across the table."""
    s = table.Ns * table.estimates
    return float(np.max(s) / np.min(s)) if np.min(s) > 0 else float("inf")


def summary_json(tables: Sequence[ConvergenceTable]) -> str:
    out = []
    for t in tables:
        d = t.as_dict()
        try:
            d["fit"] = fit_slope(t).as_dict()
        except VerifyError as exc:
            d["fit"] = {"error": str(exc)}
        out.append(d)
    return json.dumps(out, indent=1)
