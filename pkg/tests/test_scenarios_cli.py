"""Scenario configs, reports, diffs and the command-line front end."""
import json

import numpy as np
import pytest

from pilotwave.cli import main
from pilotwave.errors import ConfigError, PilotWaveError
from pilotwave.scenarios import RunReport, diff_reports, load_config, parse_config, run_scenario

SMALL = """
[scenario]
name = small_pair
budget_minutes = 1
seed = {seed}
tasks = {tasks}

[grid]
particles = 2
dim = 1
points = 128
extent_length = 8.0

[potential]
kind = harmonic
omega_frequency = 1.0

[initial]
kind = symmetrized
sign = -1

[orbital.1]
kind = gaussian
center_length = -1.5
sigma_length = 0.7

[orbital.2]
kind = gaussian
center_length = 1.5
sigma_length = 0.7

[stepper]
dt_time = {dt}
steps = 40
stride = 10

[analysis]
expect_verdict = Fermion
expect_gamma_angle = 3.141592653589793
residual_tol = {tol}
phase_tol = 1e-6
trajectories = 200

[output]
dir = out/small_pair
trajectory_csv = true
"""


def small(seed=1, tasks="classify, evolve, trajectories", dt=0.002, tol=1e-6, extra=""):
    return SMALL.format(seed=seed, tasks=tasks, dt=dt, tol=tol) + extra


def write_cfg(tmp_path, text, name="cfg.ini"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ---------------------------------------------------------------- bundled scenarios

def test_two_1d_symmetry_is_fermion(tmp_path):
    cfg = load_config("two_1d_symmetry")
    rep = run_scenario(cfg, tmp_path, tasks=("classify",))
    assert rep.payload["classify"]["verdict"] == "Fermion"
    assert abs(np.angle(np.exp(1j * (rep.payload["classify"]["gamma"] - np.pi)))) < 1e-6
    assert rep.passed


def test_anyon_winding_table(tmp_path):
    rep = run_scenario(load_config("two_2d_anyon_static"), tmp_path, tasks=("anyon-phase",))
    tab = rep.payload["anyon-phase"]
    assert tab["gamma"]
    for n, g in tab["gamma"].items():
        assert abs(np.angle(np.exp(1j * (g - int(n) * np.pi / 2)))) < 1e-6
    assert rep.passed


# ---------------------------------------------------------------- config validation

def test_negative_dt_exits_2_without_artifacts(tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", write_cfg(tmp_path, small(dt=-0.01)), "--out", str(out)])
    assert code == 2
    assert not out.exists()
    assert "config error" in capsys.readouterr().err


@pytest.mark.parametrize("extra", ["\n[grid_extra]\nfoo = 1\n", "\n[output]\nbogus = 1\n"])
def test_unknown_keys_rejected(extra):
    text = small() + extra if "grid_extra" in extra else small().replace("trajectory_csv = true",
                                                                        "trajectory_csv = true\nbogus = 1")
    with pytest.raises(ConfigError):
        parse_config(text)


def test_malformed_ini_rejected():
    with pytest.raises(ConfigError):
        parse_config("[scenario\nname = x")


def test_missing_file_rejected():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/definitely_missing.ini")


def test_seed_override_applies():
    cfg = parse_config(small(seed=1), {("scenario", "seed"): "9"})
    assert cfg.scenario.seed == 9


# ---------------------------------------------------------------- reports and diffs

def test_report_roundtrip(tmp_path):
    rep = run_scenario(parse_config(small(tasks="classify")), tmp_path)
    back = RunReport.load(tmp_path / "report.json")
    assert diff_reports(rep, back)["identical"]
    assert (tmp_path / "report.txt").read_text() == back.to_text()
    assert "symmetry_report.txt" in back.artifacts


def test_same_seed_reports_identical_and_csv_bytes_match(tmp_path):
    a = run_scenario(parse_config(small(seed=4)), tmp_path / "a")
    b = run_scenario(parse_config(small(seed=4)), tmp_path / "b")
    d = diff_reports(a, b)
    assert d["identical"]
    assert all(not d[p] for p in ("config", "payload", "checks", "artifacts", "seed"))
    assert (tmp_path / "a" / "trajectories_bohm.csv").read_bytes() == \
        (tmp_path / "b" / "trajectories_bohm.csv").read_bytes()


def test_different_seeds_only_change_sampled_quantities(tmp_path):
    a = run_scenario(parse_config(small(seed=1)), tmp_path / "a")
    b = run_scenario(parse_config(small(seed=2)), tmp_path / "b")
    d = diff_reports(a, b)
    assert not d["identical"]
    assert d["seed"]
    keys = [x["key"] for x in d["payload"]]
    # deterministic tasks do not move with the seed
    assert not [k for k in keys if k.startswith(("evolve.", "classify."))]
    # sampled trajectory starts do
    assert [k for k in keys if k.startswith("trajectories.")]
    cfg_keys = [x["key"] for x in d["config"]]
    assert cfg_keys == ["scenario.seed"]


def test_changed_tolerance_flagged_as_config_diff(tmp_path):
    a = run_scenario(parse_config(small(tasks="classify")), tmp_path / "a")
    b = run_scenario(parse_config(small(tasks="classify", tol=1e-5)), tmp_path / "b")
    d = diff_reports(a, b)
    assert [x["key"] for x in d["config"]] == ["analysis.residual_tol"]
    # the payload only echoes the tolerance it was judged against
    assert [x["key"] for x in d["payload"]] == ["classify.tolerances.residual"]


def test_diff_rejects_scenario_mismatch(tmp_path):
    a = run_scenario(parse_config(small(tasks="classify")), tmp_path / "a")
    other = a.to_dict()
    other["scenario"] = "something_else"
    with pytest.raises(PilotWaveError):
        diff_reports(a, other)


def test_diff_tolerances_absorb_small_changes(tmp_path):
    a = run_scenario(parse_config(small(tasks="evolve")), tmp_path / "a")
    b = a.to_dict()
    b["payload"]["evolve"]["norm_drift"] += 1e-13
    assert not diff_reports(a, b)["identical"]
    assert diff_reports(a, b, atol=1e-12)["identical"]


# ---------------------------------------------------------------- command line

def test_cli_classify_passes(tmp_path, capsys):
    code = main(["classify", "--config", write_cfg(tmp_path, small()), "--out", str(tmp_path / "o")])
    text = capsys.readouterr().out
    assert code == 0
    assert "PASS classify.verdict" in text
    assert json.loads((tmp_path / "o" / "report.json").read_text())["payload"].keys() == {"classify"}


def test_cli_failing_check_exits_1(tmp_path, capsys):
    text = small().replace("expect_verdict = Fermion", "expect_verdict = Boson")
    code = main(["classify", "--config", write_cfg(tmp_path, text), "--out", str(tmp_path / "o")])
    assert code == 1
    assert "FAIL classify.verdict" in capsys.readouterr().out


def test_cli_trajectories_writes_csv(tmp_path):
    code = main(["trajectories", "--config", write_cfg(tmp_path, small()), "--out", str(tmp_path / "o"),
                 "--seed", "3"])
    assert code == 0
    head = (tmp_path / "o" / "trajectories_bohm.csv").read_text().splitlines()[0]
    assert head == "t,traj_id,flag,x1_1,x2_1"
    assert json.loads((tmp_path / "o" / "report.json").read_text())["seed"] == 3


def test_cli_diff_reports_exit_codes(tmp_path, capsys):
    cfg = write_cfg(tmp_path, small(tasks="classify, trajectories"))
    for name, seed in (("a", "1"), ("b", "1"), ("c", "2")):
        assert main(["run", "--config", cfg, "--out", str(tmp_path / name), "--seed", seed]) == 0
    capsys.readouterr()
    assert main(["diff-reports", str(tmp_path / "a" / "report.json"), str(tmp_path / "b" / "report.json")]) == 0
    assert json.loads(capsys.readouterr().out)["identical"]
    assert main(["diff-reports", str(tmp_path / "a" / "report.json"), str(tmp_path / "c" / "report.json")]) == 1
    assert main(["diff-reports", str(tmp_path / "a" / "report.json"), str(tmp_path / "missing.json")]) == 2


def test_cli_requires_verb():
    with pytest.raises(SystemExit):
        main([])
