import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp
from scipy.optimize import brentq

from mflqg.model import TimeGrid, model_from_dict
from mflqg.riccati import (RiccatiError, backward_rk4, feedback_gain, integrate_linear_matrix_ode,
                           solve_major_riccati, solve_minor_riccati)

from conftest import scalar_model


def _tanh_error(steps):
    model = scalar_model(steps=steps)
    sol = solve_minor_riccati(model)
    t = model.grid.nodes
    return float(np.max(np.abs(sol.P[:, 0, 0] - np.tanh(1.0 - t))))


def test_major_tanh_closed_form():
    model = scalar_model(steps=2000)
    sol = solve_major_riccati(model)
    assert sol.P[0, 0, 0] == pytest.approx(0.7615941559557649, abs=1e-10)
    assert np.max(np.abs(sol.P[:, 0, 0] - np.tanh(1.0 - model.grid.nodes))) <= 1e-8


def test_minor_tanh_closed_form_and_runtime():
    model = scalar_model(steps=2000)
    t0 = time.perf_counter()
    sol = solve_minor_riccati(model)
    elapsed = time.perf_counter() - t0
    assert np.max(np.abs(sol.P[:, 0, 0] - np.tanh(1.0 - model.grid.nodes))) <= 1e-8
    assert elapsed < 1.0
    assert sol.P[-1, 0, 0] == 0.0


def test_fourth_order_refinement():
    ratio = _tanh_error(20) / _tanh_error(40)
    assert 12.0 < ratio < 20.0


def test_zero_state_weight_gives_zero_solution():
    model = scalar_model(A0=0.7, C0=0.4, D0=0.2, Q0=0.0, A=-0.3, C=0.5, Q=0.0)
    for sol in (solve_major_riccati(model), solve_minor_riccati(model)):
        assert not np.any(sol.P)
        assert not np.any(sol.gain)


def test_gain_substitution():
    gain, w_inv = feedback_gain(np.eye(1), np.eye(1), np.eye(1), np.eye(1), np.eye(1))
    assert gain[0, 0] == pytest.approx(-1.0, abs=1e-15)
    assert w_inv[0, 0] == pytest.approx(0.5, abs=1e-15)


def _implicit_oracle():
    # dP/dt = -(2P+1)/(1+P), P(1) = 0  integrates to  P/2 + log(2P+1)/4 = 1 - t
    return brentq(lambda p: p / 2 + np.log(2 * p + 1) / 4 - 1.0, 0.0, 5.0, xtol=1e-15)


def test_multiplicative_noise_scalar_example():
    model = scalar_model(steps=2000, A=0.0, B=0.0, C=1.0, D=1.0)
    sol = solve_minor_riccati(model)
    exact = _implicit_oracle()
    fine = solve_ivp(lambda t, p: -(2 * p + 1) / (1 + p), (1.0, 0.0), [0.0],
                     rtol=1e-12, atol=1e-14, method="DOP853").y[0, -1]
    assert fine == pytest.approx(exact, abs=1e-10)
    assert sol.P[0, 0, 0] == pytest.approx(exact, abs=1e-10)


def test_zero_rhs_keeps_terminal():
    grid = TimeGrid(1.0, 10)
    out = integrate_linear_matrix_ode(lambda j, y: np.zeros_like(y), np.eye(2), grid)
    assert np.array_equal(out, np.broadcast_to(np.eye(2), (11, 2, 2)))


def test_exponential_backward():
    grid = TimeGrid(1.0, 1000)
    out = integrate_linear_matrix_ode(lambda j, y: -y, np.ones((1, 1)), grid)
    assert out[0, 0, 0] == pytest.approx(np.e, abs=1e-9)


def test_nilpotent_linear_system():
    # dY/dt = N Y with N^2 = 0  =>  Y(t) = (I - (T - t) N) Y(T)
    Nmat = np.array([[0.0, 2.0], [0.0, 0.0]])
    YT = np.array([[1.0, -1.0], [3.0, 0.5]])
    grid = TimeGrid(1.5, 30)
    out = integrate_linear_matrix_ode(lambda j, y: Nmat @ y, YT, grid)
    for k, t in enumerate(grid.nodes):
        exact = (np.eye(2) - (1.5 - t) * Nmat) @ YT
        assert np.allclose(out[k], exact, atol=1e-13, rtol=0)


def test_blow_up_is_reported():
    grid = TimeGrid(1.0, 50)
    with pytest.raises(RiccatiError, match="node"), np.errstate(over="ignore", invalid="ignore"):
        backward_rk4(lambda j, y: -y * y * 1e3, np.ones((1, 1)) * 1e3, grid)


def test_indefinite_weight_is_reported():
    model = scalar_model(R=0.0, D=0.0)
    with pytest.raises(RiccatiError):
        solve_minor_riccati(model)


def _random_doc(seed, n, m):
    r = np.random.default_rng(seed)
    mat = lambda a, b, s=0.5: (s * r.standard_normal((a, b))).tolist()

    def pd(k, shift=0.2):
        a = r.standard_normal((k, k))
        return (a @ a.T / k + shift * np.eye(k)).tolist()

    def psd(k):
        a = r.standard_normal((k, k))
        return (a @ a.T / k).tolist()

    z = np.zeros((n, n)).tolist()
    return {"n": n, "m": m, "T": 1.0, "steps": 200,
            "major": {"A0": mat(n, n), "B0": mat(n, m), "C0": mat(n, n), "D0": mat(n, m),
                      "Q0": psd(n), "H0": z, "R0": pd(m)},
            "minor": {"A": mat(n, n), "B": mat(n, m), "C": mat(n, n), "D": mat(n, m),
                      "Q": psd(n), "H": z, "Hhat": z, "R": pd(m)}}


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 3), m=st.integers(1, 2))
def test_symmetry_positivity_and_gain_consistency(seed, n, m):
    model = model_from_dict(_random_doc(seed, n, m))
    for sol, (B, C, D, R) in ((solve_major_riccati(model), ("B0", "C0", "D0", "R0")),
                              (solve_minor_riccati(model), ("B", "C", "D", "R"))):
        P = sol.P
        assert np.array_equal(P[-1], np.zeros((n, n)))
        assert np.max(np.abs(P - np.swapaxes(P, 1, 2))) <= 1e-12
        assert np.min(np.linalg.eigvalsh(P)) >= -1e-10
        for k in (0, 57, 200):
            Bk, Ck, Dk, Rk = (model.coef[x][k] for x in (B, C, D, R))
            W = Rk + Dk.T @ P[k] @ Dk
            g = -np.linalg.solve(W, Bk.T @ P[k] + Dk.T @ P[k] @ Ck)
            assert np.allclose(sol.gain[k], g, atol=1e-12, rtol=1e-12)
            assert np.allclose(sol.rInv[k], np.linalg.inv(W), atol=1e-12, rtol=1e-12)
            again, _ = feedback_gain(P[k], Bk, Ck, Dk, Rk)
            assert np.array_equal(again, sol.gain[k])


def test_csv_dump(tmp_path):
    sol = solve_minor_riccati(scalar_model(steps=10))
    out = tmp_path / "P.csv"
    sol.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "t,P_0_0,gain_0_0"
    assert len(lines) == 12
