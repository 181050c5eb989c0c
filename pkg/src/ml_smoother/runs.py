"""Run management for the study service."""

import asyncio
import logging
import secrets
from collections.abc import Callable
from datetime import datetime
from pathlib import Path
from typing import Any

from .config import ExperimentConfig, Settings, load_config
from .database import RunDatabase
from .experiments import run_study
from .models import CreateRunRequest, RunInfo, RunReport, RunStatus, RunSummary, StudyKind
from .output import render_csv

logger = logging.getLogger("mlsmooth.runs")


def generate_run_id() -> str:
    """16-character hex run ID."""
    return secrets.token_hex(8)


class Run:
    """One submitted study and its outcome."""

    def __init__(
        self,
        run_id: str,
        study: StudyKind,
        config: ExperimentConfig,
        status: RunStatus = RunStatus.PENDING,
        created_at: datetime | None = None,
    ):
        self.run_id = run_id
        self.study = study
        self.config = config
        self.status = status
        self.created_at = created_at or datetime.now()
        self.finished_at: datetime | None = None
        self.error: str | None = None
        self.summary: RunSummary | None = None
        self.csv: str | None = None
        self.task: asyncio.Task | None = None

    def get_info(self) -> RunInfo:
        return RunInfo(
            run_id=self.run_id,
            study=self.study,
            status=self.status,
            created_at=self.created_at,
            finished_at=self.finished_at,
            error=self.error,
            summary=self.summary,
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "run_id": self.run_id,
            "study": self.study.value,
            "status": self.status.value,
            "config": self.config.model_dump(mode="json", by_alias=True),
            "created_at": self.created_at.isoformat(),
            "finished_at": self.finished_at.isoformat() if self.finished_at else None,
            "error": self.error,
            "summary": self.summary.model_dump(mode="json") if self.summary else None,
            "csv": self.csv,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Run":
        run = cls(
            run_id=data["run_id"],
            study=StudyKind(data["study"]),
            config=ExperimentConfig.model_validate(data["config"]),
            status=RunStatus(data["status"]),
            created_at=datetime.fromisoformat(data["created_at"]),
        )
        if data.get("finished_at"):
            run.finished_at = datetime.fromisoformat(data["finished_at"])
        run.error = data.get("error")
        if data.get("summary"):
            run.summary = RunSummary.model_validate(data["summary"])
        run.csv = data.get("csv")
        return run


StudyRunner = Callable[[StudyKind, ExperimentConfig], RunReport]


class RunManager:
    """Schedules studies off the event loop and persists them in SQLite."""

    def __init__(self, runs_dir: str | Path | None = None, runner: StudyRunner = run_study):
        self.runs_dir = Path(runs_dir) if runs_dir else Settings.from_env().runs_dir
        self.runs_dir.mkdir(parents=True, exist_ok=True)
        self._runs: dict[str, Run] = {}
        self._lock = asyncio.Lock()
        self._runner = runner
        self._db = RunDatabase(self.runs_dir / "runs.db")
        self._load_runs()

    def _load_runs(self) -> None:
        for data in self._db.load_all_runs():
            try:
                run = Run.from_dict(data)
            except Exception as exc:
                logger.warning("run_load_failed run=%s error=%s", data.get("run_id"), exc)
                continue
            # a run interrupted by a restart cannot resume
            if run.status in (RunStatus.PENDING, RunStatus.RUNNING):
                run.status = RunStatus.FAILED
                run.error = "interrupted by service restart"
                self._db.save_run(run.to_dict())
            self._runs[run.run_id] = run
        if self._runs:
            logger.info("runs_loaded count=%d", len(self._runs))

    async def create_run(self, request: CreateRunRequest) -> Run:
        """Validate the config, register the run and start it in a worker thread."""
        config = load_config(preset=request.preset, overrides=request.config)
        run = Run(run_id=generate_run_id(), study=request.study, config=config)
        async with self._lock:
            self._runs[run.run_id] = run
            self._db.save_run(run.to_dict())
        run.task = asyncio.create_task(self._execute(run))
        logger.info("run_created run=%s study=%s", run.run_id, run.study.value)
        return run

    async def _execute(self, run: Run) -> None:
        async with self._lock:
            run.status = RunStatus.RUNNING
            self._db.save_run(run.to_dict())
        try:
            report = await asyncio.to_thread(self._runner, run.study, run.config)
        except Exception as exc:
            logger.error("run_failed run=%s error=%s", run.run_id, exc)
            async with self._lock:
                run.status = RunStatus.FAILED
                run.error = f"{type(exc).__name__}: {exc}"
                run.finished_at = datetime.now()
                self._db.save_run(run.to_dict())
            return
        async with self._lock:
            run.status = RunStatus.COMPLETED
            run.summary = report.summary
            run.csv = render_csv(report)
            run.finished_at = datetime.now()
            data = run.to_dict()
            data["steps"] = [row.model_dump(mode="json") for row in report.rows]
            self._db.save_run(data)
        logger.info("run_completed run=%s coverage=%.3f", run.run_id, report.summary.coverage_fraction)

    async def wait(self, run_id: str) -> Run | None:
        """Block until the run's task finishes."""
        run = await self.get_run(run_id)
        if run and run.task:
            await asyncio.shield(run.task)
        return run

    async def get_run(self, run_id: str) -> Run | None:
        async with self._lock:
            return self._runs.get(run_id)

    async def list_runs(self) -> list[Run]:
        async with self._lock:
            return list(self._runs.values())

    async def get_steps(self, run_id: str) -> list[dict[str, Any]]:
        return self._db.load_steps(run_id)

    async def delete_run(self, run_id: str) -> bool:
        async with self._lock:
            run = self._runs.pop(run_id, None)
            if run is None:
                return False
            if run.task and not run.task.done():
                run.task.cancel()
            self._db.delete_run(run_id)
            return True

    async def shutdown(self) -> None:
        for run in list(self._runs.values()):
            if run.task and not run.task.done():
                run.task.cancel()


_run_manager: RunManager | None = None


def get_run_manager() -> RunManager | None:
    return _run_manager


def set_run_manager(manager: RunManager | None) -> None:
    global _run_manager
    _run_manager = manager
