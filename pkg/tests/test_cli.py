import hashlib
import json
import subprocess
import sys

import pytest

from mflqg.cli import run

from conftest import scenario_path


def _digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_check_on_uncoupled_scenario(tmp_path, capsys):
    code = run(["check", "--scenario", str(scenario_path("zero_coupling")), "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "check.json").read_text())
    assert rep["assumptions"]["sa_ok"] is True
    for key in ("h3_lhs", "h3_rhs", "h3_ok"):
        assert key in rep["assumptions"]
    assert "rho1" in rep["contraction"] and "k12" in rep["contraction"]
    assert (tmp_path / "manifest.json").exists()


def test_check_fails_on_indefinite_weight(tmp_path):
    doc = json.loads(scenario_path("zero_coupling").read_text())
    doc["minor"]["R"] = -1.0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(doc))
    assert run(["check", "--scenario", str(bad), "--steps", "50"]) == 2


def test_check_can_require_contraction(tmp_path):
    args = ["check", "--scenario", str(scenario_path("zero_coupling")), "--steps", "50"]
    assert run(args) == 0
    assert run(args + ["--require-h3"]) == 2


def test_cc_divergence_exit(capsys):
    code = run(["cc", "--scenario", str(scenario_path("coupled_scalar")), "--steps", "100",
                "--coupling-scale", "100", "--max-iter", "50"])
    assert code == 3
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert "last_factor" in payload and payload["last_factor"] > 1


def test_cc_outputs(tmp_path):
    code = run(["cc", "--scenario", str(scenario_path("coupled_scalar")), "--steps", "100",
                "--out", str(tmp_path)])
    assert code == 0
    summary = json.loads((tmp_path / "cc_summary.json").read_text())
    assert summary["sup_distance"] <= 1e-6
    assert (tmp_path / "cc_field_K1.csv").exists()
    assert (tmp_path / "cc_picard_log.csv").read_text().startswith("iteration,change,factor")


def test_oracle_relative_difference(tmp_path):
    code = run(["oracle", "--scenario", str(scenario_path("coupled_scalar")), "--steps", "100",
                "--N", "4", "--seed", "7", "--paths", "200", "--out", str(tmp_path)])
    assert code == 0
    rep = json.loads((tmp_path / "oracle_summary.json").read_text())
    assert rep["relative_difference"] <= 1e-10
    assert "Jsoc_summed" in rep and "Jsoc_stacked" in rep
    assert rep["printed_weight_max_block_discrepancy"] > 0


def test_riccati_outputs(tmp_path):
    assert run(["riccati", "--scenario", str(scenario_path("scalar_riccati")), "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "riccati.json").read_text())
    assert rep["P0_at_0"][0][0] == pytest.approx(0.7615941559557649, abs=1e-9)
    assert (tmp_path / "riccati_P0.csv").exists() and (tmp_path / "riccati_P.csv").exists()


def test_simulate_is_reproducible(tmp_path):
    out = tmp_path / "run"
    args = ["simulate", "--scenario", str(scenario_path("coupled_scalar")), "--steps", "100",
            "--N", "4", "--paths", "30", "--seed", "3", "--out", str(out)]
    names = ("simulate_trajectories.csv", "simulate_costs.json", "manifest.json")
    assert run(args) == 0
    first = {name: (out / name).read_bytes() for name in names}
    assert run(args) == 0
    for name in names:
        assert (out / name).read_bytes() == first[name], name


def test_manifest_contents(tmp_path):
    scen = scenario_path("coupled_scalar")
    assert run(["riccati", "--scenario", str(scen), "--steps", "50", "--out", str(tmp_path)]) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["subcommand"] == "riccati"
    assert man["scenario_sha256"] == _digest(scen)
    assert man["seed"] == 42 and man["grid"]["steps"] == 50


def test_sweep_and_h4_outputs(tmp_path):
    scen = str(scenario_path("coupled_scalar_c0"))
    assert run(["sweep", "--scenario", scen, "--steps", "50", "--Ns", "2,4,8", "--paths", "20",
                "--functionals", "lemma2,lemma4", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "sweep_lemma2.csv").exists()
    summary = json.loads((tmp_path / "sweep_summary.json").read_text())
    assert [d["functional"] for d in summary] == ["lemma2", "lemma4"]
    assert run(["h4", "--scenario", scen, "--steps", "50", "--Ns", "2,4,8", "--paths", "20",
                "--out", str(tmp_path)]) == 0
    assert (tmp_path / "h4_y.csv").exists() and (tmp_path / "h4_gamma.csv").exists()


def test_scenario_file_untouched(tmp_path):
    scen = scenario_path("coupled_scalar")
    before = _digest(scen)
    for cmd in ("check", "riccati"):
        run([cmd, "--scenario", str(scen), "--steps", "50", "--out", str(tmp_path / cmd)])
    assert _digest(scen) == before


def test_usage_errors(tmp_path, capsys):
    assert run(["simulate", "--scenario", str(scenario_path("coupled_scalar")), "--bogus"]) == 1
    assert run(["check", "--scenario", str(tmp_path / "missing.json")]) == 1
    assert run(["frobnicate"]) == 1
    assert run(["sweep", "--scenario", str(scenario_path("coupled_scalar")), "--Ns", "a,b"]) == 1
    assert run(["sweep", "--scenario", str(scenario_path("coupled_scalar")), "--steps", "20",
                "--functionals", "nope"]) == 1


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "mflqg", "--version"], capture_output=True, text=True)
    assert out.returncode == 0
    assert "mflqg" in out.stdout
