"""Acceptance criteria, one test each, at their stated tolerances.

Every test records its outcome in ``conftest.ACCEPTANCE`` before asserting,
so the terminal summary lists one PASS/FAIL line per criterion.
"""
import time

import numpy as np
import pytest

import conftest
from conftest import scalar_model, scenario_path
from mflqg.ccfield import (PicardDivergence, StackedCC, assemble_stacked, conditional_copies,
                           contraction_report, matching_residual, solve_cc_decoupling,
                           solve_cc_picard)
from mflqg.cli import run as cli_run
from mflqg.model import TimeGrid, load_scenario, model_from_dict
from mflqg.population import (build_social_oracle, discrete_social_optimum, frechet_gap,
                              moments_directional_derivative, normalize_direction,
                              simulate_population)
from mflqg.riccati import RiccatiError, solve_major_riccati, solve_minor_riccati
from mflqg.verify import (adjoint_representation, estimate_h4, fit_slope, plateau_ratio, prepare,
                          sweep_population)

NS = [8, 16, 32, 64, 128, 256]
COUPLINGS = ("F", "Ftilde", "Gtilde", "H", "Hhat", "F0", "Ftilde0", "H0")


def record(k, ok, text):
    conftest.ACCEPTANCE[k] = (bool(ok), text)
    assert ok, text


@pytest.fixture(scope="module")
def coupled():
    return prepare(load_scenario(scenario_path("coupled_scalar")))


# 1 -------------------------------------------------------------------------

def test_criterion_01_riccati_closed_form():
    model = scalar_model(steps=2000)
    t0 = time.perf_counter()
    sol = solve_minor_riccati(model)
    elapsed = time.perf_counter() - t0
    err = float(np.max(np.abs(sol.P[:, 0, 0] - np.tanh(1.0 - model.grid.nodes))))
    record(1, err <= 1e-8 and elapsed < 1.0, f"max |P - tanh| = {err:.2e}, {elapsed:.3f} s")


# 2 and 3 ------------------------------------------------------------------

def _random_doc(seed):
    r = np.random.default_rng(1000 + seed)
    n, m = int(r.integers(1, 3)), int(r.integers(1, 3))
    mat = lambda a, b, s=0.5: (s * r.standard_normal((a, b))).tolist()

    def pd(k):
        a = r.standard_normal((k, k))
        return (a @ a.T / k + 0.5 * np.eye(k)).tolist()

    def psd(k):
        a = r.standard_normal((k, k))
        return (a @ a.T / k).tolist()

    return {"n": n, "m": m, "N": 8, "T": 1.0, "steps": 2000,
            "xi0": r.standard_normal(n).tolist(), "xi": r.standard_normal(n).tolist(),
            "major": {"A0": mat(n, n), "B0": mat(n, m), "C0": mat(n, n), "D0": mat(n, m),
                      "F0": mat(n, n), "Ftilde0": mat(n, n), "Q0": psd(n), "H0": mat(n, n),
                      "R0": pd(m)},
            "minor": {"A": mat(n, n), "B": mat(n, m), "C": mat(n, n), "D": mat(n, m),
                      "F": mat(n, n), "Ftilde": mat(n, n), "Gtilde": mat(n, n), "Q": psd(n),
                      "H": mat(n, n), "Hhat": mat(n, n), "R": pd(m)}}


def _scaled_doc(doc, c):
    out = {**doc, "major": dict(doc["major"]), "minor": dict(doc["minor"])}
    for key in COUPLINGS:
        part = "major" if key.endswith("0") else "minor"
        out[part][key] = (c * np.asarray(doc[part][key])).tolist()
    return out


def _converging_scenario(seed):
    """Halve the couplings until the Picard iteration converges."""
    doc = _random_doc(seed)
    c = 1.0
    while True:
        model = model_from_dict(_scaled_doc(doc, c))
        cc = assemble_stacked(model, solve_major_riccati(model), solve_minor_riccati(model))
        t0 = time.perf_counter()
        try:
            pic, _ = solve_cc_picard(cc, tol=1e-12, max_iter=200)
        except (PicardDivergence, RiccatiError):
            c /= 2
            continue
        return model, cc, pic, time.perf_counter() - t0, c


@pytest.fixture(scope="module")
def random_solves():
    out = []
    for seed in range(10):
        model, cc, pic, t_pic, c = _converging_scenario(seed)
        t0 = time.perf_counter()
        dec = solve_cc_decoupling(cc)
        t_dec = time.perf_counter() - t0
        out.append({"seed": seed, "n": model.n, "m": model.m, "scale": c, "cc": cc, "pic": pic,
                    "dec": dec, "t": max(t_pic, t_dec)})
    return out


def test_criterion_02_solver_cross_agreement(random_solves):
    gaps = [s["dec"].sup_distance(s["pic"]) for s in random_solves]
    slowest = max(s["t"] for s in random_solves)
    ok = max(gaps) <= 1e-6 and slowest < 10.0
    scales = ",".join(f"{s['scale']:g}" for s in random_solves)
    record(2, ok, f"max sup distance {max(gaps):.2e}, slowest solve {slowest:.2f} s, "
                  f"coupling scales [{scales}]")


def test_criterion_03_decoupling_residual(random_solves):
    res = []
    for s in random_solves:
        f = s["dec"]
        res.append(matching_residual(s["cc"], f.K1, f.K2, f.M1, f.M2, f.N1, f.N2))
    record(3, max(res) <= 1e-8, f"max matching residual {max(res):.2e} over 10 scenarios")


# 4 -------------------------------------------------------------------------

def test_criterion_04_conditional_mean(coupled):
    zhat, mean, se = conditional_copies(coupled.field, coupled.cc, copies=10_000, seed=11)
    rms = np.sqrt(np.mean((zhat - mean) ** 2, axis=1))
    bound = 3 * np.sqrt(np.mean(se ** 2, axis=1))
    worst = float(np.max(rms[1:] / bound[1:]))
    ok = bool(np.all(rms <= bound + 1e-14))
    record(4, ok, f"max RMS / (3 se) over nodes = {worst:.3f} with 10^4 copies")


# 5 -------------------------------------------------------------------------

def test_criterion_05_oracle_equality(coupled):
    model = coupled.model
    N, paths, seed = 4, 500, 7
    prof, _ = coupled.sample(seed, 0, paths)
    o = build_social_oracle(model, N)
    g = model.grid
    cost, _ = o.simulate(prof, paths, seed, dt=g.dt, weights=g.trapezoid_weights())
    summed = simulate_population(model, prof, N, paths, seed).Ji_path.sum(axis=1).mean()
    rel = abs(cost.mean() - summed) / abs(summed)
    record(5, rel <= 1e-10, f"relative difference {rel:.2e}; printed-weight block discrepancy "
                            f"{o.q_discrepancy():.3g}")


# 6, 7, 8 -----------------------------------------------------------------

def _sweep(coupled, functional, paths):
    t0 = time.perf_counter()
    table = sweep_population(coupled.model, coupled, NS, paths=paths, seed=2024, functional=functional)
    return table, fit_slope(table), time.perf_counter() - t0


def _describe(table, fit, elapsed):
    est = " ".join(f"{e:.3g}" for e in table.estimates)
    return f"slope {fit.slope:.3f} (estimates {est}), {elapsed:.0f} s"


def test_criterion_06_state_average_rate(coupled):
    table, fit, elapsed = _sweep(coupled, "lemma2", 2000)
    ok = -1.25 <= fit.slope <= -0.75 and elapsed < 300
    record(6, ok, _describe(table, fit, elapsed))


def test_criterion_07_major_state_rate(coupled):
    table, fit, elapsed = _sweep(coupled, "lemma4", 2000)
    record(7, -1.25 <= fit.slope <= -0.75, _describe(table, fit, elapsed))


def test_criterion_08_major_cost_gap_rate(coupled):
    table, fit, elapsed = _sweep(coupled, "major_gap", 5000)
    record(8, -0.75 <= fit.slope <= -0.25, _describe(table, fit, elapsed))


# 9 -------------------------------------------------------------------------

def _stationarity_at_optimum(model, N):
    o = build_social_oracle(model, N)
    g = model.grid
    w = g.trapezoid_weights()
    K = g.steps + 1
    gain, off = discrete_social_optimum(o, g.dt, w)
    Ku = np.zeros((K, (N + 1) * o.m, o.dim))
    Ku[:, o.m:] = gain
    ku = np.zeros((K, (N + 1) * o.m))
    ku[:, o.m:] = off
    worst = 0.0
    for shape in (np.ones_like(g.nodes), np.cos(np.pi * g.nodes), g.nodes ** 2):
        d = normalize_direction(shape[:, None] * np.ones((1, N)), w, N)
        worst = max(worst, abs(moments_directional_derivative(o, g.dt, w, Ku, ku, d)))
    return worst


def test_criterion_09_frechet_stationarity(coupled):
    model = coupled.model
    worst = max(_stationarity_at_optimum(model, N) for N in (2, 4))
    g = model.grid
    w = g.trapezoid_weights()
    paths = 2000
    wins, pairs = 0, []
    for seed in range(10):
        prof, _ = coupled.sample(seed, 0, paths)
        gaps = []
        for N in (2, 8):
            d = normalize_direction(np.cos(np.pi * g.nodes)[:, None] * np.ones((1, N)), w, N)
            gaps.append(abs(frechet_gap(model, build_social_oracle(model, N), prof, d[:, :, None],
                                        paths=paths, seed=seed)))
        pairs.append(gaps)
        wins += gaps[1] < gaps[0]
    ok = worst <= 1e-6 and wins >= 8
    median = np.median(np.array(pairs), axis=0)
    record(9, ok, f"derivative at optimum {worst:.2e}; gap decreased in {wins}/10 seeds "
                  f"(median {median[0]:.3g} -> {median[1]:.3g})")


# 10 ------------------------------------------------------------------------

def test_criterion_10_h4_plateau():
    model = load_scenario(scenario_path("coupled_scalar_c0"))
    b = prepare(model)
    rep = adjoint_representation(model, b.field, b.cc)
    ty, _ = estimate_h4(model, rep, b, NS, paths=1000, seed=5)
    ratio = plateau_ratio(ty)
    slope = fit_slope(ty).slope
    ok = ratio <= 2.0 and -1.25 <= slope <= -0.75
    record(10, ok, f"N * estimate varies by x{ratio:.3f}, slope {slope:.3f}")


# 11 ------------------------------------------------------------------------

def test_criterion_11_simulate_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = cli_run(["simulate", "--scenario", str(scenario_path("coupled_scalar")), "--N", "8",
                        "--paths", "50", "--seed", "9", "--out", str(out)])
        assert code == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
    ok = bool(outs[0]) and outs[0] == outs[1]
    record(11, ok, f"{len(outs[0])} CSV files byte-identical across two runs")


# 12 ------------------------------------------------------------------------

def test_criterion_12_contraction_hand_check():
    n = 2
    cc = StackedCC.from_blocks(TimeGrid(1.0, 20), n, A1=-2 * np.eye(2 * n), B2=-2 * np.eye(5 * n))
    rep = contraction_report(cc)
    # by hand: both symmetric parts are -2 I and every coupling constant is
    # zero, so lhs = 2(-2) + 2(-2) = -8 < rhs = 0
    err = max(abs(rep.rho1 + 2), abs(rep.rho2 + 2), abs(rep.h3_lhs + 8), abs(rep.h3_rhs))
    ok = err <= 1e-12 and rep.h3_holds is True
    record(12, ok, f"rho1 {rep.rho1}, rho2 {rep.rho2}, h3_holds {rep.h3_holds}, "
                   f"hand-check error {err:.1e}")
