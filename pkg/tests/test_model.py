import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mflqg.model import (GridError, ScenarioParseError, ShapeError, TimeGrid, load_scenario,
                         model_from_dict, model_to_dict, save_scenario, validate_assumptions,
                         write_paths_csv)

from conftest import scalar_doc, scalar_model, scenario_path


def test_constants_broadcast_across_nodes():
    model = scalar_model(steps=50, A0=-0.5, C=0.3)
    for key, path in model.coef.items():
        assert path.shape[0] == 51, key
        assert np.all(path == path[0]), key
    assert model.A0[17, 0, 0] == -0.5
    assert model.C[50, 0, 0] == 0.3


def test_omitted_coupling_defaults_to_zero():
    doc = scalar_doc()
    assert "Ftilde0" not in doc["major"]
    model = model_from_dict(doc)
    assert model.Ftilde0.shape == (101, 1, 1)
    assert not np.any(model.Ftilde0)


def test_wrong_block_shape_rejected():
    doc = scalar_doc(B0=[[1.0], [2.0]])
    with pytest.raises(ShapeError, match="B0"):
        model_from_dict(doc)


def test_missing_cost_rejected():
    doc = scalar_doc()
    del doc["minor"]["R"]
    with pytest.raises(ScenarioParseError, match="R"):
        model_from_dict(doc)


def test_unknown_coefficient_rejected():
    doc = scalar_doc()
    doc["minor"]["Z"] = 1.0
    with pytest.raises(ScenarioParseError, match="Z"):
        model_from_dict(doc)


def test_missing_grid_field_rejected():
    doc = scalar_doc()
    del doc["steps"]
    with pytest.raises(ScenarioParseError, match="steps"):
        model_from_dict(doc)


def test_bad_grid_rejected():
    with pytest.raises(GridError):
        TimeGrid(1.0, 0)
    with pytest.raises(GridError):
        TimeGrid(-1.0, 10)


def test_unreadable_file(tmp_path):
    with pytest.raises(ScenarioParseError):
        load_scenario(tmp_path / "nope.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ScenarioParseError):
        load_scenario(bad)


def test_per_node_scalar_path():
    vals = list(np.linspace(0.0, 1.0, 11))
    model = model_from_dict(scalar_doc(steps=10, A=vals))
    assert np.allclose(model.A[:, 0, 0], vals)


def test_coefficients_are_read_only():
    model = scalar_model()
    with pytest.raises(ValueError):
        model.A[0, 0, 0] = 1.0


def test_grid_weights_integrate_constants_exactly():
    g = TimeGrid(2.5, 37)
    assert g.trapezoid_weights().sum() == pytest.approx(2.5, abs=1e-14)
    assert g.nodes[0] == 0.0 and g.nodes[-1] == 2.5
    assert g.half_nodes.shape == (75,)


def test_steps_override_resamples():
    model = load_scenario(scenario_path("coupled_scalar"), steps=400)
    assert model.grid.steps == 400
    assert model.A[0, 0, 0] == pytest.approx(-0.3)


_entries = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), m=st.integers(1, 2), data=st.data())
def test_round_trip_through_json(tmp_path_factory, n, m, data):
    def mat(r, c):
        return [[data.draw(_entries) for _ in range(c)] for _ in range(r)]

    def sym(k):
        a = np.array(mat(k, k))
        return (a + a.T).tolist()

    doc = {"n": n, "m": m, "N": 3, "T": 1.5, "steps": 12,
           "xi0": [data.draw(_entries) for _ in range(n)], "xi": [data.draw(_entries) for _ in range(n)],
           "major": {"A0": mat(n, n), "B0": mat(n, m), "F0": mat(n, n), "Q0": sym(n), "H0": sym(n),
                     "R0": sym(m)},
           "minor": {"A": mat(n, n), "D": mat(n, m), "Gtilde": mat(n, n), "Q": sym(n), "H": sym(n),
                     "Hhat": sym(n), "R": sym(m)}}
    model = model_from_dict(doc)
    path = tmp_path_factory.mktemp("rt") / "s.json"
    save_scenario(model, path)
    again = load_scenario(path)
    assert again.grid == model.grid and again.N == model.N
    assert np.array_equal(again.xi0, model.xi0) and np.array_equal(again.xi, model.xi)
    for key in model.coef:
        assert np.array_equal(again.coef[key], model.coef[key]), key
    assert model_to_dict(again) == model_to_dict(model)


def test_zero_state_weight_is_admissible():
    rep = validate_assumptions(scalar_model(Q0=0.0, Q=1.0, R0=1.0, R=1.0))
    assert rep.sa_ok and rep.h1_ok and rep.h2_ok


def test_zero_control_weight_flagged():
    rep = validate_assumptions(scalar_model(R=0.0))
    assert not rep.sa_ok
    assert any(d.startswith("R ") for d in rep.details)


def test_asymmetric_weight_flagged():
    doc = {"n": 2, "m": 1, "T": 1.0, "steps": 20,
           "major": {"Q0": [[1, 0.5], [0, 1]], "H0": 0 * np.eye(2), "R0": 1},
           "minor": {"Q": np.eye(2), "H": 0 * np.eye(2), "Hhat": 0 * np.eye(2), "R": 1}}
    doc["major"]["H0"] = doc["major"]["H0"].tolist()
    doc["minor"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in doc["minor"].items()}
    rep = validate_assumptions(model_from_dict(doc))
    assert not rep.h2_ok
    assert any("Q0" in d for d in rep.details)


def test_contraction_inequality_zero_dynamics():
    # zero dynamics, unit costs: rho1 = rho2 = 0 and every norm in the
    # inequality vanishes, so 0 < 0 fails
    model = scalar_model(B0=0.0, B=0.0)
    rep = validate_assumptions(model)
    assert rep.h3_lhs == 0.0
    assert rep.h3_rhs == 0.0
    assert rep.h3_ok is False


def test_report_serializes():
    rep = validate_assumptions(load_scenario(scenario_path("zero_coupling")))
    text = json.dumps(rep.as_dict())
    assert "h3_lhs" in text and "sa_ok" in text


def test_paths_csv_layout(tmp_path):
    g = TimeGrid(1.0, 4)
    arr = np.arange(5 * 2 * 2, dtype=float).reshape(5, 2, 2)
    out = tmp_path / "p.csv"
    write_paths_csv(out, g, {"M": arr})
    lines = out.read_text().splitlines()
    assert lines[0] == "t,M_0_0,M_0_1,M_1_0,M_1_1"
    assert len(lines) == 6
    last = [float(v) for v in lines[-1].split(",")]
    assert last == [1.0, 16.0, 17.0, 18.0, 19.0]
