import json

import pytest

from hippofusion import cli, db
from hippofusion.errors import (
    EXIT_CONFIG,
    EXIT_EMPTY_REPORT,
    EXIT_INCOMPATIBLE,
    EXIT_MISSING_FILE,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_USAGE,
)
from hippofusion.gradcheck import CheckResult

from conftest import tiny_run_payload


@pytest.fixture
def config_path(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(tiny_run_payload()))
    return path


def last_error(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_usage_errors(capsys):
    assert cli.parse_and_dispatch([]) == EXIT_USAGE
    assert cli.parse_and_dispatch(["train", "--bogus"]) == EXIT_USAGE
    assert cli.parse_and_dispatch(["--version"]) == EXIT_OK
    assert "hippofusion" in capsys.readouterr().out


def test_schema_command(capsys, tmp_path):
    assert cli.parse_and_dispatch(["schema"]) == EXIT_OK
    schema = json.loads(capsys.readouterr().out)
    assert "roi" in schema["properties"]
    target = tmp_path / "schema.json"
    assert cli.parse_and_dispatch(["schema", "--write", str(target)]) == EXIT_OK
    assert json.loads(target.read_text()) == schema


def test_missing_config_file_exit_code(capsys, tmp_path):
    assert cli.parse_and_dispatch(["train", "-c", str(tmp_path / "absent.json")]) == EXIT_MISSING_FILE
    assert last_error(capsys)["error"] == "MissingFileError"


def test_config_error_reports_key_path(capsys, tmp_path):
    assert cli.parse_and_dispatch(["train", "-o", str(tmp_path)]) == EXIT_CONFIG
    error = last_error(capsys)
    assert error["error"] == "ConfigError"
    assert error["details"]["key_path"] == "roi.centers"


def test_sweep_option_conflicts(capsys, config_path):
    assert cli.parse_and_dispatch(["sweep", "-c", str(config_path)]) == EXIT_INCOMPATIBLE
    assert cli.parse_and_dispatch(["sweep", "-c", str(config_path), "--pair", "AD-NC", "--grid", "g.json"]) == EXIT_INCOMPATIBLE
    assert cli.parse_and_dispatch(["sweep", "--grid", "g.json", "--reference-grid"]) == EXIT_INCOMPATIBLE
    assert last_error(capsys)["error"] == "IncompatibleOptionsError"


def test_report_json_with_output_dir_is_incompatible(tmp_path):
    assert cli.parse_and_dispatch(["report", str(tmp_path), "--json", "-o", str(tmp_path)]) == EXIT_INCOMPATIBLE


def test_report_without_runs_is_empty(tmp_path):
    assert cli.parse_and_dispatch(["report", str(tmp_path)]) == EXIT_EMPTY_REPORT


def test_gradcheck_exit_codes(monkeypatch, capsys):
    monkeypatch.setattr(cli, "run_suite", lambda seeds, tol: [CheckResult("conv3d", s, 1e-9, tol) for s in seeds])
    assert cli.parse_and_dispatch(["gradcheck", "--seeds", "0", "1"]) == EXIT_OK
    assert "conv3d" in capsys.readouterr().out
    monkeypatch.setattr(cli, "run_suite", lambda seeds, tol: [CheckResult("network", 0, 1e-2, tol)])
    assert cli.parse_and_dispatch(["gradcheck"]) == EXIT_NUMERIC
    assert "FAIL" in capsys.readouterr().out


def test_synth_ingest_augment_train_evaluate_report(tmp_path, config_path, capsys):
    data_dir = tmp_path / "data"
    assert cli.parse_and_dispatch(["synth", "-c", str(config_path), "-o", str(data_dir)]) == EXIT_OK
    manifest = data_dir / "manifest.json"
    assert manifest.exists()

    assert cli.parse_and_dispatch(["ingest", str(manifest)]) == EXIT_OK
    assert "18 subjects OK" in capsys.readouterr().out

    payload = tiny_run_payload()
    payload["data"] = {"manifest": str(manifest)}
    run_config = tmp_path / "manifest_run.json"
    run_config.write_text(json.dumps(payload))

    plan_dir = tmp_path / "plan"
    assert cli.parse_and_dispatch(["augment", "-c", str(run_config), "-o", str(plan_dir)]) == EXIT_OK
    plan = json.loads((plan_dir / "manifest.augmented.json").read_text())
    assert len(plan["test_sets"]["test1"]) == 18
    assert len(plan["train_samples"]) == 24

    run_dir = tmp_path / "run"
    assert cli.parse_and_dispatch(["train", "-c", str(run_config), "-o", str(run_dir)]) == EXIT_OK
    for name in ("log.csv", "summary.json", "model.hfck", "config_echo.json"):
        assert (run_dir / name).exists()

    eval_dir = tmp_path / "eval"
    args = ["evaluate", "-c", str(run_dir / "config_echo.json"), "--checkpoint", str(run_dir / "model.hfck")]
    assert cli.parse_and_dispatch(args + ["-o", str(eval_dir)]) == EXIT_OK
    evaluation = json.loads((eval_dir / "evaluation.json").read_text())
    assert evaluation["test0"]["n"] == 4

    capsys.readouterr()
    assert cli.parse_and_dispatch(["report", str(run_dir)]) == EXIT_OK
    assert "test0 ACC" in capsys.readouterr().out


def test_extract_writes_sample_store(tmp_path, config_path, capsys):
    out = tmp_path / "store"
    assert cli.parse_and_dispatch(["extract", "-c", str(config_path), "-o", str(out), "--sets", "test0", "--limit", "3"]) == EXIT_OK
    assert len(list((out / "samples" / "test0").glob("*.bin"))) == 3
    assert "test0: 3 samples" in capsys.readouterr().out


def test_sweep_from_grid_file(tmp_path, config_path):
    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps([{}, {"input_mode": "DTI_L+DTI_R"}]))
    out = tmp_path / "sweep"
    assert cli.parse_and_dispatch(["sweep", "-c", str(config_path), "--grid", str(grid), "-o", str(out)]) == EXIT_OK
    lines = (out / "sweep_table.csv").read_text().splitlines()
    assert len(lines) == 3
    assert all(",completed," in line for line in lines[1:])


def test_runs_lists_and_cancels_registered_runs(capsys, tmp_path):
    path = db.init_db(tmp_path / db.DB_NAME)
    first = db.create_run(path, "AD-NC/sMRI_L+sMRI_R/28/C1", {})
    second = db.create_run(path, "AD-NC/sMRI_L+sMRI_R/38/C1", {})
    db.update_run_status(path, first, "failed", error="ManifestError: no test subjects")

    assert cli.parse_and_dispatch(["runs", str(tmp_path)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0].split()[:3] == [str(first), "failed", "AD-NC/sMRI_L+sMRI_R/28/C1"]
    assert "no test subjects" in lines[0]
    assert lines[1].split() == [str(second), "pending", "AD-NC/sMRI_L+sMRI_R/38/C1"]

    assert cli.parse_and_dispatch(["runs", str(tmp_path), "--cancel", str(second)]) == EXIT_OK
    assert db.get_run(path, second)["status"] == "cancelled"
    capsys.readouterr()
    assert cli.parse_and_dispatch(["runs", str(tmp_path), "--status", "cancelled"]) == EXIT_OK
    assert [line.split()[0] for line in capsys.readouterr().out.splitlines()] == [str(second)]


def test_runs_refuses_finished_run_and_missing_registry(capsys, tmp_path):
    assert cli.parse_and_dispatch(["runs", str(tmp_path)]) == EXIT_MISSING_FILE
    assert last_error(capsys)["error"] == "MissingFileError"
    path = db.init_db(tmp_path / db.DB_NAME)
    run_id = db.create_run(path, "k", {})
    db.update_run_status(path, run_id, "completed")
    assert cli.parse_and_dispatch(["runs", str(tmp_path), "--cancel", str(run_id)]) == EXIT_INCOMPATIBLE
    assert last_error(capsys)["details"]["run_id"] == run_id
