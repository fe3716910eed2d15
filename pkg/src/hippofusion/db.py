from __future__ import annotations

import json
import sqlite3
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

DB_NAME = "runs.db"

FINISHED = ("completed", "failed", "cancelled")


def get_connection(db_path: Union[str, Path]) -> sqlite3.Connection:
    conn = sqlite3.connect(db_path)
    conn.row_factory = sqlite3.Row
    return conn


def init_db(db_path: Union[str, Path]) -> Path:
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    conn = get_connection(db_path)
    cur = conn.cursor()

    cur.execute("""
        CREATE TABLE IF NOT EXISTS runs (
            id INTEGER PRIMARY KEY AUTOINCREMENT,
            run_key TEXT UNIQUE NOT NULL,
            status TEXT NOT NULL DEFAULT 'pending',
            parameters TEXT,
            result TEXT,
            error_message TEXT,
            progress_message TEXT,
            created_at TEXT DEFAULT CURRENT_TIMESTAMP,
            started_at TEXT,
            completed_at TEXT
        )
    """)

    conn.commit()
    conn.close()
    return db_path


def _row_to_run(row: sqlite3.Row) -> Dict[str, Any]:
    run = dict(row)
    if run["parameters"]:
        run["parameters"] = json.loads(run["parameters"])
    if run["result"]:
        run["result"] = json.loads(run["result"])
    return run


def create_run(db_path: Union[str, Path], run_key: str, parameters: Dict[str, Any]) -> int:
    """Register a run as pending, or reset an unfinished/failed row with the same key."""
    conn = get_connection(db_path)
    cur = conn.cursor()

    cur.execute("""
        INSERT INTO runs (run_key, status, parameters)
        VALUES (?, 'pending', ?)
        ON CONFLICT(run_key) DO UPDATE SET
            status = 'pending',
            parameters = excluded.parameters,
            result = NULL,
            error_message = NULL,
            progress_message = NULL,
            started_at = NULL,
            completed_at = NULL
    """, (run_key, json.dumps(parameters, sort_keys=True)))

    cur.execute("SELECT id FROM runs WHERE run_key = ?", (run_key,))
    run_id = cur.fetchone()["id"]
    conn.commit()
    conn.close()

    return run_id


def update_run_status(
    db_path: Union[str, Path],
    run_id: int,
    status: str,
    result: Optional[Dict[str, Any]] = None,
    error: Optional[str] = None,
    progress: Optional[str] = None,
) -> None:
    conn = get_connection(db_path)
    cur = conn.cursor()

    updates = ["status = ?"]
    params: List[Any] = [status]

    if result is not None:
        updates.append("result = ?")
        params.append(json.dumps(result, sort_keys=True))

    if error:
        updates.append("error_message = ?")
        params.append(error)

    if progress:
        updates.append("progress_message = ?")
        params.append(progress)

    if status == "running":
        updates.append("started_at = COALESCE(started_at, CURRENT_TIMESTAMP)")

    if status in FINISHED:
        updates.append("completed_at = CURRENT_TIMESTAMP")

    params.append(run_id)
    cur.execute(f"UPDATE runs SET {', '.join(updates)} WHERE id = ?", params)
    conn.commit()
    conn.close()


def get_run(db_path: Union[str, Path], run_id: int) -> Optional[Dict[str, Any]]:
    conn = get_connection(db_path)
    cur = conn.cursor()
    cur.execute("SELECT * FROM runs WHERE id = ?", (run_id,))
    row = cur.fetchone()
    conn.close()
    return _row_to_run(row) if row else None


def get_run_by_key(db_path: Union[str, Path], run_key: str) -> Optional[Dict[str, Any]]:
    conn = get_connection(db_path)
    cur = conn.cursor()
    cur.execute("SELECT * FROM runs WHERE run_key = ?", (run_key,))
    row = cur.fetchone()
    conn.close()
    return _row_to_run(row) if row else None


def list_runs(db_path: Union[str, Path], status: Optional[str] = None) -> List[Dict[str, Any]]:
    """Runs in registration order, optionally filtered by status."""
    conn = get_connection(db_path)
    cur = conn.cursor()

    if status:
        cur.execute("SELECT * FROM runs WHERE status = ? ORDER BY id", (status,))
    else:
        cur.execute("SELECT * FROM runs ORDER BY id")

    rows = cur.fetchall()
    conn.close()
    return [_row_to_run(row) for row in rows]
