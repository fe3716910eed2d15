from hippofusion import db


def test_create_run_is_an_upsert(tmp_path):
    path = db.init_db(tmp_path / db.DB_NAME)
    first = db.create_run(path, "AD-NC/sMRI_L+sMRI_R/28/C1", {"seed": 1})
    db.update_run_status(path, first, "failed", error="boom")
    again = db.create_run(path, "AD-NC/sMRI_L+sMRI_R/28/C1", {"seed": 2})
    assert again == first
    run = db.get_run(path, first)
    assert run["status"] == "pending"
    assert run["error_message"] is None
    assert run["parameters"] == {"seed": 2}


def test_status_timestamps(tmp_path):
    path = db.init_db(tmp_path / db.DB_NAME)
    run_id = db.create_run(path, "k", {})
    db.update_run_status(path, run_id, "running", progress="iteration 10/100")
    running = db.get_run(path, run_id)
    assert running["started_at"] is not None
    assert running["completed_at"] is None
    assert running["progress_message"] == "iteration 10/100"
    db.update_run_status(path, run_id, "completed", result={"output_dir": "x"})
    done = db.get_run(path, run_id)
    assert done["started_at"] == running["started_at"]
    assert done["completed_at"] is not None
    assert done["result"] == {"output_dir": "x"}


def test_list_runs_filters_by_status(tmp_path):
    path = db.init_db(tmp_path / db.DB_NAME)
    ids = [db.create_run(path, key, {}) for key in ("a", "b", "c")]
    db.update_run_status(path, ids[1], "completed")
    assert [r["run_key"] for r in db.list_runs(path)] == ["a", "b", "c"]
    assert [r["run_key"] for r in db.list_runs(path, status="pending")] == ["a", "c"]
    assert db.get_run_by_key(path, "missing") is None
    assert db.init_db(path) == path
