"""SQLite persistence for study runs."""

import json
import sqlite3
from contextlib import contextmanager
from pathlib import Path
from typing import Any


class RunDatabase:
    """One `runs` row per submitted run plus its per-step table in `steps`.

    Uses a single SQLite file under the runs directory.
    """

    def __init__(self, db_path: str | Path):
        self.db_path = str(db_path)
        Path(self.db_path).parent.mkdir(parents=True, exist_ok=True)
        self._init_db()

    @contextmanager
    def _get_conn(self):
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        conn.execute("PRAGMA foreign_keys = ON")
        try:
            yield conn
            conn.commit()
        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()

    def _init_db(self):
        with self._get_conn() as conn:
            conn.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    study TEXT NOT NULL,
                    status TEXT NOT NULL,
                    config TEXT NOT NULL,
                    created_at TEXT NOT NULL,
                    finished_at TEXT,
                    error TEXT,
                    summary TEXT,
                    csv TEXT
                )
            """)
            conn.execute("""
                CREATE TABLE IF NOT EXISTS steps (
                    run_id TEXT NOT NULL,
                    k INTEGER NOT NULL,
                    row TEXT NOT NULL,
                    PRIMARY KEY (run_id, k),
                    FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
                )
            """)

    def save_run(self, run: dict[str, Any]) -> None:
        """Insert or update the run row; `steps` rows are replaced when given."""
        with self._get_conn() as conn:
            conn.execute("""
                INSERT INTO runs
                (run_id, study, status, config, created_at, finished_at, error, summary, csv)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)
                ON CONFLICT(run_id) DO UPDATE SET
                    status = excluded.status,
                    config = excluded.config,
                    finished_at = excluded.finished_at,
                    error = excluded.error,
                    summary = excluded.summary,
                    csv = excluded.csv
            """, (
                run["run_id"],
                run["study"],
                run["status"],
                json.dumps(run["config"]),
                run["created_at"],
                run.get("finished_at"),
                run.get("error"),
                json.dumps(run["summary"]) if run.get("summary") is not None else None,
                run.get("csv"),
            ))
            if run.get("steps") is not None:
                conn.execute("DELETE FROM steps WHERE run_id = ?", (run["run_id"],))
                conn.executemany(
                    "INSERT INTO steps (run_id, k, row) VALUES (?, ?, ?)",
                    [(run["run_id"], step["k"], json.dumps(step)) for step in run["steps"]],
                )

    def _row_to_dict(self, row: sqlite3.Row) -> dict[str, Any]:
        return {
            "run_id": row["run_id"],
            "study": row["study"],
            "status": row["status"],
            "config": json.loads(row["config"]),
            "created_at": row["created_at"],
            "finished_at": row["finished_at"],
            "error": row["error"],
            "summary": json.loads(row["summary"]) if row["summary"] else None,
            "csv": row["csv"],
        }

    def load_run(self, run_id: str) -> dict[str, Any] | None:
        with self._get_conn() as conn:
            row = conn.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,)).fetchone()
            return self._row_to_dict(row) if row else None

    def load_all_runs(self) -> list[dict[str, Any]]:
        with self._get_conn() as conn:
            rows = conn.execute("SELECT * FROM runs ORDER BY created_at").fetchall()
            return [self._row_to_dict(r) for r in rows]

    def load_steps(self, run_id: str) -> list[dict[str, Any]]:
        with self._get_conn() as conn:
            rows = conn.execute("SELECT row FROM steps WHERE run_id = ? ORDER BY k", (run_id,)).fetchall()
            return [json.loads(r["row"]) for r in rows]

    def delete_run(self, run_id: str) -> bool:
        with self._get_conn() as conn:
            cursor = conn.execute("DELETE FROM runs WHERE run_id = ?", (run_id,))
            return cursor.rowcount > 0
