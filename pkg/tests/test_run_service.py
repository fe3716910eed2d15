import asyncio
import csv

import pytest

from hippofusion import db, run_service
from hippofusion.errors import ConfigError
from hippofusion.run_service import (
    REFERENCE_ROI_ARCHITECTURES,
    TABLE_COLUMNS,
    cancel_run,
    execute_run,
    reference_grid,
    run_dir,
    run_seed,
    sweep,
)


def read_table(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_reference_grid_has_sixteen_runs(tiny_run):
    grid = reference_grid(tiny_run)
    assert len(grid) == 16
    assert len({run.run_key for run in grid}) == 16
    assert {(r.network.roi_size, r.network.name) for r in grid} == set(REFERENCE_ROI_ARCHITECTURES)
    assert {r.input_mode for r in grid} == {"sMRI_L+sMRI_R", "sMRI_L+sMRI_R+DTI_L+DTI_R"}
    c4 = next(r for r in grid if r.network.name == "C4")
    assert c4.network.conv_kernel_sizes == [7, 6, 5, 4, 3, 3]


def test_reference_grid_all_modes_and_pair(tiny_run):
    grid = reference_grid(tiny_run, classifier_pair="MCI-NC", all_modes=True)
    assert len(grid) == 32
    assert {r.classifier_pair for r in grid} == {"MCI-NC"}


def test_run_seeds_depend_on_key_not_position(tiny_run):
    grid = reference_grid(tiny_run)
    assert len({r.seed for r in grid}) == 16
    reversed_grid = reference_grid(tiny_run)[::-1]
    assert {r.run_key: r.seed for r in grid} == {r.run_key: r.seed for r in reversed_grid}
    assert run_seed(7, "AD-NC/x/28/C1") == run_seed(7, "AD-NC/x/28/C1")


def test_run_dir_is_filesystem_safe(tmp_path, tiny_run):
    path = run_dir(tmp_path, tiny_run)
    assert path.name == "AD-NC__sMRI_L_sMRI_R__8__custom"


def test_single_run_sweep(tmp_path, tiny_run):
    rows = sweep([tiny_run], tmp_path)
    assert [r.status for r in rows] == ["completed"]
    table = read_table(tmp_path / "sweep_table.csv")
    assert list(table[0]) == TABLE_COLUMNS
    assert table[0]["status"] == "completed"
    assert float(table[0]["test0_acc_hw"]) >= 0.0
    assert (run_dir(tmp_path, tiny_run) / "log.csv").exists()
    record = db.get_run_by_key(tmp_path / db.DB_NAME, tiny_run.run_key)
    assert record["status"] == "completed"
    assert record["completed_at"] is not None
    assert record["result"]["summary"]["run_key"] == tiny_run.run_key


def test_failed_run_is_recorded_and_sweep_continues(tmp_path, tiny_run_factory):
    good = tiny_run_factory()
    bad = tiny_run_factory(
        input_mode="DTI_L+DTI_R",
        roi={"centers": {"left_hippocampus": [1, 8, 8], "right_hippocampus": [18, 8, 8]}},
    )
    rows = sweep([bad, good], tmp_path)
    assert [r.status for r in rows] == ["failed", "completed"]
    assert rows[0].error.startswith("ROIOutOfBoundsError")
    table = read_table(tmp_path / "sweep_table.csv")
    assert table[0]["error"].startswith("ROIOutOfBoundsError")
    assert table[0]["test0_acc"] == ""
    failed = db.list_runs(tmp_path / db.DB_NAME, status="failed")
    assert [r["run_key"] for r in failed] == [bad.run_key]


def test_resume_skips_completed_runs(tmp_path, tiny_run, monkeypatch):
    first = sweep([tiny_run], tmp_path)

    def refuse(*args, **kwargs):
        raise AssertionError("completed run was trained again")

    monkeypatch.setattr(run_service, "train", refuse)
    again = sweep([tiny_run], tmp_path, resume=True)
    assert again[0].status == "completed"
    assert again[0].summary == first[0].summary


def test_results_do_not_depend_on_grid_order(tmp_path, tiny_run_factory):
    a = tiny_run_factory()
    b = tiny_run_factory(input_mode="DTI_L+DTI_R")
    forward = sweep([a, b], tmp_path / "forward", workers=2)
    backward = sweep([b, a], tmp_path / "backward")
    assert forward[0].summary == backward[1].summary
    assert forward[1].summary == backward[0].summary


def test_duplicate_run_keys_are_rejected(tmp_path, tiny_run):
    with pytest.raises(ConfigError):
        sweep([tiny_run, tiny_run], tmp_path)


def test_cancel_before_execution(tmp_path, tiny_run):
    db_path = db.init_db(tmp_path / db.DB_NAME)
    run_id = db.create_run(db_path, tiny_run.run_key, {})
    assert cancel_run(db_path, run_id)
    row = asyncio.run(execute_run(db_path, run_id, tiny_run, None, tmp_path))
    assert row.status == "cancelled"
    assert db.get_run(db_path, run_id)["status"] == "cancelled"
    assert not cancel_run(db_path, run_id)
    assert not cancel_run(db_path, 999)


def test_run_cancelled_through_the_registry_alone_is_skipped(tmp_path, tiny_run):
    db_path = db.init_db(tmp_path / db.DB_NAME)
    run_id = db.create_run(db_path, tiny_run.run_key, {})
    db.update_run_status(db_path, run_id, "cancelled")
    assert run_id not in run_service._cancelled_runs
    row = asyncio.run(execute_run(db_path, run_id, tiny_run, None, tmp_path))
    assert row.status == "cancelled"
    assert db.get_run(db_path, run_id)["progress_message"] == "Run was cancelled before execution"
