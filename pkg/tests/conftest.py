import copy
import json
from pathlib import Path

import numpy as np
import pytest

from mflqg.model import model_from_dict

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"

_SCALAR = {
    "n": 1, "m": 1, "N": 4, "T": 1.0, "steps": 100, "xi0": [1.0], "xi": [0.5],
    "major": {"A0": 0.0, "B0": 1.0, "C0": 0.0, "D0": 0.0, "Q0": 1.0, "H0": 0.0, "R0": 1.0},
    "minor": {"A": 0.0, "B": 1.0, "C": 0.0, "D": 0.0, "Q": 1.0, "H": 0.0, "Hhat": 0.0, "R": 1.0},
}


def scalar_doc(steps=None, N=None, **coef):
    """Scalar scenario document; keyword arguments override coefficients."""
    doc = copy.deepcopy(_SCALAR)
    if steps is not None:
        doc["steps"] = steps
    if N is not None:
        doc["N"] = N
    for key, val in coef.items():
        if key in ("xi0", "xi", "T"):
            doc[key] = val
        elif key.endswith("0"):
            doc["major"][key] = val
        else:
            doc["minor"][key] = val
    return doc


def scalar_model(steps=None, N=None, **coef):
    return model_from_dict(scalar_doc(steps, N, **coef))


def scenario_path(name):
    return SCENARIOS / f"{name}.json"


def scenario_doc(name):
    return json.loads(scenario_path(name).read_text())


# criteria of the acceptance module report here; printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key:2d}: {'PASS' if ok else 'FAIL'}  {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
