import copy
import hashlib
import json
from pathlib import Path

import pytest

from mfrbsde import cli
from mfrbsde.config import load_config
from mfrbsde.writer import MANIFEST_NAME, read_manifest

CONFIG_DIR = Path(__file__).parent / "configs"

PUSHED_DOWN = {
    "schema_version": 1,
    "name": "pushed-down",
    "problem": {
        "n": 1,
        "l": 1,
        "d": 1,
        "horizon": 1.0,
        "coefficients": {"kind": "zero"},
        "initial": {"kind": "point", "x": [0.0]},
        "driver": {"kind": "constant", "c": [-1.0]},
        "terminal": {"kind": "constant", "c": [0.0]},
        "obstacle": {"kind": "affine", "alpha": [1.0], "a": 0.0, "b": 0.0},
    },
    "solver": {"n_particles": 10, "steps": 200, "penalty": 20.0, "basis_degree": 0, "seed": 7},
}

QUADRATIC = {
    "schema_version": 1,
    "name": "quadratic",
    "problem": {
        "coefficients": {"kind": "constant", "drift": [0.0], "sigma": [[1.0]]},
        "initial": {"kind": "gaussian", "mean": [0.0], "std": 0.5},
        "driver": {"kind": "zero"},
        "terminal": {"kind": "quadratic"},
        "obstacle": {"kind": "affine", "alpha": [-1.0], "b": 100.0},
    },
    "solver": {"n_particles": 500, "steps": 5, "penalty": 10.0, "basis_degree": 2, "seed": 5},
    "study": {
        "kind": "decoupling",
        "queries": [{"t": 0.0, "x": [0.0]}, {"t": 1.0, "x": [0.5]}],
        "continuity": {"t": 0.0, "x": [0.0], "radii": {"dx": 0.2}},
        "complementarity": {"times": [0.0, 1.0], "points": [[0.0]]},
    },
}


def write_config(tmp_path, data, name="config.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)


def with_changes(data, **blocks):
    out = copy.deepcopy(data)
    for key, value in blocks.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key].update(value)
        else:
            out[key] = value
    return out


def run(tmp_path, command, data, *extra, out="out"):
    path = write_config(tmp_path, data)
    return cli.main([command, "--config", path, "--out", str(tmp_path / out), *extra])


def last_error(capsys):
    lines = [l for l in capsys.readouterr().err.splitlines() if l.startswith("{")]
    return json.loads(lines[-1])["error"]


def test_solve_writes_summary_series_and_manifest(tmp_path):
    assert run(tmp_path, "solve", PUSHED_DOWN) == 0
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mean_Y0"][0] == pytest.approx(-1.0 / 20.0, abs=1e-4)
    assert summary["terminal_projection"]["moved"] == 0
    header = (out / "series.csv").read_text().splitlines()[0]
    assert header.startswith("t [time],mean_Y0 [1]")
    manifest = read_manifest(out)
    assert manifest["seed"] == 7
    assert set(manifest["files"]) == {
        "resolved_config.json",
        "summary.json",
        "series.csv",
        "plot_mean_Y0.csv",
        "plot_mean_K.csv",
        "plot_sup_H_minus.csv",
    }
    for name, digest in manifest["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest


def test_outputs_are_byte_identical_across_runs_and_threads(tmp_path):
    assert run(tmp_path, "solve", QUADRATIC, "--threads", "1", out="a") == 0
    assert run(tmp_path, "solve", QUADRATIC, "--threads", "4", out="b") == 0
    a = read_manifest(tmp_path / "a")
    b = read_manifest(tmp_path / "b")
    assert a["files"] == b["files"]
    assert a["config_hash"] == b["config_hash"]
    for name in a["files"]:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_override_is_recorded(tmp_path):
    assert run(tmp_path, "solve", PUSHED_DOWN, "--seed", "99") == 0
    out = tmp_path / "out"
    assert read_manifest(out)["seed"] == 99
    assert json.loads((out / "resolved_config.json").read_text())["solver"]["seed"] == 99


def test_csv_format_can_be_switched_off(tmp_path):
    data = with_changes(PUSHED_DOWN, output={"formats": ["json"]})
    assert run(tmp_path, "solve", data) == 0
    assert not (tmp_path / "out" / "series.csv").exists()
    assert (tmp_path / "out" / "summary.json").exists()


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("MFRBSDE_OUTPUT_ROOT", str(tmp_path / "root"))
    data = with_changes(PUSHED_DOWN, output={"directory": "runs/env"})
    assert cli.main(["solve", "--config", write_config(tmp_path, data)]) == 0
    assert (tmp_path / "root" / "runs" / "env" / MANIFEST_NAME).exists()


def test_check_assumptions_counterexample_fails_with_witnesses(tmp_path):
    data = with_changes(
        PUSHED_DOWN, problem=dict(PUSHED_DOWN["problem"], obstacle={"kind": "affine", "alpha": [1.0], "a": 1.0, "alpha_prime": [-1.0]})
    )
    assert run(tmp_path, "check-assumptions", data) == 1
    report = json.loads((tmp_path / "out" / "assumptions.json").read_text())
    failed = {c["condition"]: c for c in report["conditions"] if c["status"] == "fail"}
    assert set(failed) == {"sign_15", "strict_38"}
    assert all(c["witness"] is not None for c in failed.values())
    assert (tmp_path / "out" / MANIFEST_NAME).exists()


def test_check_assumptions_theta_mixture_passes(tmp_path):
    path = str(CONFIG_DIR / "theta_mixture.json")
    assert cli.main(["check-assumptions", "--config", path, "--out", str(tmp_path / "out")]) == 0


def test_zero_alpha_exits_with_validation_error(tmp_path, capsys):
    path = str(CONFIG_DIR / "alpha_zero.json")
    assert cli.main(["solve", "--config", path, "--out", str(tmp_path / "out")]) == 2
    err = last_error(capsys)
    assert err["exit_code"] == 2
    assert "lower gradient bound" in err["message"]
    assert not (tmp_path / "out" / MANIFEST_NAME).exists()


def test_unknown_keys_and_bad_json_are_rejected(tmp_path, capsys):
    data = with_changes(PUSHED_DOWN, solver=dict(PUSHED_DOWN["solver"], tolerance=1.0))
    assert run(tmp_path, "solve", data) == 2
    assert "tolerance" in last_error(capsys)["message"]
    bad = tmp_path / "bad.json"
    bad.write_text("{not json", encoding="utf-8")
    assert cli.main(["solve", "--config", str(bad)]) == 2
    assert cli.main(["solve", "--config", str(tmp_path / "missing.json")]) == 2


def test_solver_horizon_must_match_problem(tmp_path):
    data = with_changes(PUSHED_DOWN, solver=dict(PUSHED_DOWN["solver"], horizon=2.0))
    assert run(tmp_path, "solve", data) == 2


def test_non_contracting_picard_exits_3(tmp_path, capsys):
    data = with_changes(PUSHED_DOWN, solver=dict(PUSHED_DOWN["solver"], steps=10, penalty=1000.0))
    assert run(tmp_path, "solve", data) == 3
    err = last_error(capsys)
    assert err["type"] == "NumericalError"
    assert not (tmp_path / "out" / MANIFEST_NAME).exists()


def test_penalty_study(tmp_path):
    data = with_changes(PUSHED_DOWN, study={"kind": "penalty", "m_grid": [10.0, 20.0, 40.0]})
    assert run(tmp_path, "study", data, "--kind", "penalty", "--threads", "2") == 0
    header = (tmp_path / "out" / "study.csv").read_text().splitlines()[0]
    assert header.split(",")[:2] == ["m [1]", "m_sup_H_minus_sq [1]"]
    assert json.loads((tmp_path / "out" / "study.json").read_text())["passed"] is True


def test_stability_study_zero_row(tmp_path):
    data = with_changes(PUSHED_DOWN, study={"kind": "stability", "eps_grid": [0.0, 0.01, 0.1]})
    assert run(tmp_path, "study", data, "--kind", "stability") == 0
    rows = json.loads((tmp_path / "out" / "study.json").read_text())["rows"]
    assert rows[0]["sup_dY_sq"] == 0.0


def test_study_kind_must_match_config(tmp_path, capsys):
    data = with_changes(PUSHED_DOWN, study={"kind": "penalty", "m_grid": [10.0, 20.0, 40.0]})
    assert run(tmp_path, "study", data, "--kind", "chaos") == 2
    assert "chaos" in last_error(capsys)["message"]


def test_study_grids_are_validated_in_config(tmp_path):
    data = with_changes(PUSHED_DOWN, study={"kind": "chaos", "n_grid": [50, 200], "n_ref": 100})
    assert run(tmp_path, "study", data, "--kind", "chaos") == 2


def test_decoupling_command(tmp_path):
    assert run(tmp_path, "decoupling", QUADRATIC) == 0
    out = tmp_path / "out"
    for name in ("field.csv", "continuity.csv", "complementarity.csv", "decoupling.json"):
        assert (out / name).exists(), name
    report = json.loads((out / "decoupling.json").read_text())
    assert report["passed"]["complementarity"] is True
    terminal_row = report["queries"][1]
    assert terminal_row["u"] == 0.25


def test_decoupling_with_wrong_sign_exits_2(tmp_path, capsys):
    path = str(CONFIG_DIR / "wrong_sign_decoupling.json")
    assert cli.main(["decoupling", "--config", path, "--out", str(tmp_path / "out")]) == 2
    assert "sign convention" in last_error(capsys)["message"]


def test_negative_threads_rejected(tmp_path):
    assert run(tmp_path, "solve", PUSHED_DOWN, "--threads", "-1") == 2


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.json")), ids=lambda p: p.stem)
def test_shipped_configs_validate(path):
    cfg = load_config(path)
    assert cfg.schema_version == 1
    assert cfg.solver.horizon == cfg.problem.horizon


def test_unexpected_failures_still_report_a_json_error(tmp_path, capsys, monkeypatch):
    def broken(cfg, writer, workers):
        raise RuntimeError("disk went away")

    monkeypatch.setitem(cli.COMMANDS, "solve", broken)
    assert run(tmp_path, "solve", PUSHED_DOWN) == 3
    err = last_error(capsys)
    assert err == {"type": "RuntimeError", "message": "disk went away", "exit_code": 3}
    assert not (tmp_path / "out" / MANIFEST_NAME).exists()
