"""Problem data for the major/minor mean-field LQG model.

Every time-dependent coefficient is stored as a stack of matrices sampled on a
uniform grid. Scenario files are JSON; constants are broadcast to all nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

MAJOR_KEYS = ("A0", "B0", "C0", "D0", "F0", "Ftilde0", "Q0", "H0", "R0")
MINOR_KEYS = ("A", "B", "C", "D", "F", "Ftilde", "Gtilde", "Q", "H", "Hhat", "R")
COST_KEYS = ("Q0", "H0", "R0", "Q", "H", "Hhat", "R")
SYMMETRIC_KEYS = ("Q0", "H0", "R0", "Q", "H", "Hhat", "R")


class ModelError(Exception):
    """Base class for scenario and model errors."""


class ScenarioParseError(ModelError):
    pass


class ShapeError(ModelError):
    pass


class GridError(ModelError):
    pass


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid 0 = t_0 < ... < t_steps = T."""

    T: float
    steps: int

    def __post_init__(self):
        if not isinstance(self.steps, (int, np.integer)) or self.steps < 1:
            raise GridError(f"steps must be a positive integer, got {self.steps!r}")
        if not (math.isfinite(self.T) and self.T > 0):
            raise GridError(f"horizon T must be positive, got {self.T!r}")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def nodes(self) -> np.ndarray:
        return np.arange(self.steps + 1) * self.dt

    @property
    def half_nodes(self) -> np.ndarray:
        """Nodes and midpoints, 2*steps + 1 points."""
        return np.arange(2 * self.steps + 1) * (0.5 * self.dt)

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.steps + 1, self.dt)
        w[0] = w[-1] = 0.5 * self.dt
        return w


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


def to_half_grid(values: np.ndarray) -> np.ndarray:
    """Nodal samples -> nodes plus midpoints, midpoints by averaging neighbours."""
    steps = values.shape[0] - 1
    out = np.empty((2 * steps + 1,) + values.shape[1:])
    out[0::2] = values
    out[1::2] = 0.5 * (values[:-1] + values[1:])
    return out


def hermite_half(values: np.ndarray, derivs: np.ndarray, dt: float) -> np.ndarray:
    """Nodes plus midpoints by cubic Hermite interpolation (fourth order)."""
    steps = values.shape[0] - 1
    out = np.empty((2 * steps + 1,) + values.shape[1:])
    out[0::2] = values
    out[1::2] = 0.5 * (values[:-1] + values[1:]) + (dt / 8.0) * (derivs[:-1] - derivs[1:])
    return out


@dataclass(frozen=True)
class Model:
    """All coefficient paths, dimensions, horizon and initial states.

    ``coef[name]`` has shape (steps+1, rows, cols). ``N`` is the population size
    used by simulations; the limiting solvers never look at it.
    """

    n: int
    m: int
    N: int
    grid: TimeGrid
    xi0: np.ndarray
    xi: np.ndarray
    coef: Dict[str, np.ndarray] = field(repr=False)

    def __getattr__(self, name):
        # convenient read access: model.A0, model.Q, ...
        coef = self.__dict__.get("coef")
        if coef is not None and name in coef:
            return coef[name]
        raise AttributeError(name)

    def half(self, name: str) -> np.ndarray:
        """Coefficient on the half grid (midpoints averaged)."""
        return to_half_grid(self.coef[name])

    def replace(self, **changes) -> "Model":
        """Copy with some coefficients replaced (constants are broadcast)."""
        coef = dict(self.coef)
        kw = {}
        for key, val in changes.items():
            if key in coef:
                coef[key] = _freeze(_broadcast(val, coef[key].shape[1:], self.grid.steps, key))
            else:
                kw[key] = val
        out = Model(
            n=kw.pop("n", self.n), m=kw.pop("m", self.m), N=kw.pop("N", self.N),
            grid=kw.pop("grid", self.grid), xi0=_freeze(kw.pop("xi0", self.xi0)),
            xi=_freeze(kw.pop("xi", self.xi)), coef=coef)
        if kw:
            raise TypeError(f"unknown fields {sorted(kw)}")
        return out

    def with_steps(self, steps: int) -> "Model":
        """Resample every coefficient on a new uniform grid (linear in time)."""
        if steps == self.grid.steps:
            return self
        grid = TimeGrid(self.grid.T, int(steps))
        old_t = self.grid.nodes
        new_t = grid.nodes
        coef = {}
        for key, val in self.coef.items():
            if np.all(val == val[0]):
                new = np.broadcast_to(val[0], (steps + 1,) + val.shape[1:]).copy()
            else:
                flat = val.reshape(val.shape[0], -1)
                new = np.stack([np.interp(new_t, old_t, flat[:, j]) for j in range(flat.shape[1])], 1)
                new = new.reshape((steps + 1,) + val.shape[1:])
            coef[key] = _freeze(new)
        return Model(self.n, self.m, self.N, grid, self.xi0, self.xi, coef)

    def with_population(self, N: int) -> "Model":
        return Model(self.n, self.m, int(N), self.grid, self.xi0, self.xi, self.coef)


def _shape_of(key: str, n: int, m: int):
    if key in ("B0", "D0", "B", "D"):
        return (n, m)
    if key in ("R0", "R"):
        return (m, m)
    return (n, n)


def _broadcast(val, shape, steps: int, key: str) -> np.ndarray:
    try:
        arr = np.asarray(val, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"{key}: not a numeric matrix ({exc})") from None
    rows, cols = shape
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim == 1 and arr.shape[0] == steps + 1 and (rows, cols) == (1, 1):
        # per-node scalars for a 1x1 coefficient
        arr = arr.reshape(steps + 1, 1, 1)
    elif arr.ndim == 1:
        if rows == 1:
            arr = arr.reshape(1, -1)
        elif cols == 1:
            arr = arr.reshape(-1, 1)
    if arr.ndim == 2:
        if arr.shape != (rows, cols):
            raise ShapeError(f"{key}: expected shape {(rows, cols)}, got {arr.shape}")
        arr = np.broadcast_to(arr, (steps + 1, rows, cols)).copy()
    elif arr.ndim == 3:
        if arr.shape != (steps + 1, rows, cols):
            raise ShapeError(
                f"{key}: per-node array must have shape {(steps + 1, rows, cols)}, got {arr.shape}")
    else:
        raise ShapeError(f"{key}: cannot interpret array of shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ScenarioParseError(f"{key}: non-finite entries")
    return arr


def _vector(val, n: int, key: str) -> np.ndarray:
    try:
        arr = np.asarray(val, dtype=float).reshape(-1)
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"{key}: not a numeric vector ({exc})") from None
    if arr.shape != (n,):
        raise ShapeError(f"{key}: expected length {n}, got {arr.shape[0]}")
    return arr


def model_from_dict(doc: dict, steps: Optional[int] = None) -> Model:
    """Build a Model from a parsed scenario document."""
    if not isinstance(doc, dict):
        raise ScenarioParseError("scenario must be a JSON object")
    try:
        n = int(doc["n"])
        m = int(doc["m"])
        T = float(doc["T"])
        file_steps = int(doc["steps"])
    except KeyError as exc:
        raise ScenarioParseError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioParseError(f"bad scalar field ({exc})") from None
    if n < 1 or m < 1:
        raise ShapeError(f"dimensions must be positive, got n={n}, m={m}")
    grid = TimeGrid(T, file_steps)
    N = int(doc.get("N", 1))
    major = doc.get("major", {})
    minor = doc.get("minor", {})
    if not isinstance(major, dict) or not isinstance(minor, dict):
        raise ScenarioParseError("'major' and 'minor' must be objects")
    unknown = (set(major) - set(MAJOR_KEYS)) | (set(minor) - set(MINOR_KEYS))
    if unknown:
        raise ScenarioParseError(f"unknown coefficient names {sorted(unknown)}")
    coef = {}
    for group, keys in ((major, MAJOR_KEYS), (minor, MINOR_KEYS)):
        for key in keys:
            shape = _shape_of(key, n, m)
            if key in group:
                coef[key] = _freeze(_broadcast(group[key], shape, file_steps, key))
            elif key in COST_KEYS:
                raise ScenarioParseError(f"missing cost matrix {key!r}")
            else:
                coef[key] = _freeze(np.zeros((file_steps + 1,) + shape))
    xi0 = _freeze(_vector(doc.get("xi0", np.zeros(n)), n, "xi0"))
    xi = _freeze(_vector(doc.get("xi", np.zeros(n)), n, "xi"))
    model = Model(n, m, N, grid, xi0, xi, coef)
    if steps is not None:
        model = model.with_steps(int(steps))
    return model


def load_scenario(path, steps: Optional[int] = None) -> Model:
    """Read a JSON scenario file into a Model.

    ``steps`` optionally overrides the grid resolution of the file.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioParseError(f"cannot read {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(f"{path}: {exc}") from None
    return model_from_dict(doc, steps=steps)


def model_to_dict(model: Model) -> dict:
    """Inverse of model_from_dict; constant paths are written as one matrix."""
    def enc(arr):
        if np.all(arr == arr[0]):
            return arr[0].tolist()
        return arr.tolist()

    return {
        "n": model.n, "m": model.m, "N": model.N,
        "T": model.grid.T, "steps": model.grid.steps,
        "xi0": model.xi0.tolist(), "xi": model.xi.tolist(),
        "major": {k: enc(model.coef[k]) for k in MAJOR_KEYS},
        "minor": {k: enc(model.coef[k]) for k in MINOR_KEYS},
    }


def save_scenario(model: Model, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1))


@dataclass(frozen=True)
class AssumptionReport:
    h1_ok: bool
    h2_ok: bool
    sa_ok: bool
    h3_ok: bool
    sa_margin: float
    h3_lhs: float
    h3_rhs: float
    details: List[str]

    def as_dict(self) -> dict:
        return {
            "h1_ok": self.h1_ok, "h2_ok": self.h2_ok, "sa_ok": self.sa_ok,
            "h3_ok": self.h3_ok, "sa_margin": self.sa_margin,
            "h3_lhs": self.h3_lhs, "h3_rhs": self.h3_rhs, "details": list(self.details),
        }


def _min_eig(path: np.ndarray) -> float:
    sym = 0.5 * (path + np.swapaxes(path, 1, 2))
    return float(np.min(np.linalg.eigvalsh(sym)))


def validate_assumptions(model: Model, psd_tol: float = 1e-10, pd_tol: float = 1e-8) -> AssumptionReport:
    """Check boundedness, symmetry, the standard sign conditions and the
    contraction inequality built from the stacked consistency system."""
    details = []
    h1_ok = all(np.all(np.isfinite(v)) for v in model.coef.values())
    if not h1_ok:
        details.append("non-finite coefficient values")
    h2_ok = True
    for key in SYMMETRIC_KEYS:
        a = model.coef[key]
        asym = float(np.max(np.abs(a - np.swapaxes(a, 1, 2))))
        if asym > 1e-12 * max(1.0, float(np.max(np.abs(a)))):
            h2_ok = False
            details.append(f"{key} not symmetric (max asymmetry {asym:.3g})")
    sa_ok = True
    for key in ("Q0", "Q"):
        lo = _min_eig(model.coef[key])
        if lo < -psd_tol:
            sa_ok = False
            details.append(f"{key} not positive semidefinite (min eigenvalue {lo:.6g})")
    margins = []
    for key in ("R0", "R"):
        lo = _min_eig(model.coef[key])
        margins.append(lo)
        if not lo > pd_tol:
            sa_ok = False
            details.append(f"{key} not uniformly positive definite (min eigenvalue {lo:.6g})")
    sa_margin = float(min(margins))

    h3_ok, lhs, rhs = False, float("nan"), float("nan")
    if h1_ok:
        from .riccati import RiccatiError, solve_major_riccati, solve_minor_riccati
        from .ccfield import assemble_stacked, contraction_report
        try:
            cc = assemble_stacked(model, solve_major_riccati(model), solve_minor_riccati(model))
            rep = contraction_report(cc)
            h3_ok, lhs, rhs = rep.h3_holds, rep.h3_lhs, rep.h3_rhs
            if not h3_ok:
                details.append(f"contraction inequality fails: {lhs:.6g} >= {rhs:.6g}")
        except RiccatiError as exc:
            details.append(f"stacked system unavailable: {exc}")
    return AssumptionReport(h1_ok, h2_ok, sa_ok, h3_ok, sa_margin, lhs, rhs, details)


def write_paths_csv(path, grid: TimeGrid, paths: Dict[str, np.ndarray]) -> None:
    """Write matrix paths as CSV: column t, then NAME_i_j row-major entries."""
    header = ["t"]
    cols = [grid.nodes]
    for name, arr in paths.items():
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        for i in range(arr.shape[1]):
            for j in range(arr.shape[2]):
                header.append(f"{name}_{i}_{j}")
                cols.append(arr[:, i, j])
    table = np.column_stack(cols)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in table:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
