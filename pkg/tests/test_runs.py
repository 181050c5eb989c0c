import pytest

from ml_smoother.config import load_config
from ml_smoother.database import RunDatabase
from ml_smoother.errors import ConfigError
from ml_smoother.models import CreateRunRequest, RunStatus, StudyKind
from ml_smoother.runs import Run, RunManager, generate_run_id


def _request(**config) -> CreateRunRequest:
    return CreateRunRequest(study=StudyKind.LINEAR, preset="linear-reduced", config={"run": {"n": 4}} | config)


def test_generate_run_id():
    ids = {generate_run_id() for _ in range(100)}
    assert len(ids) == 100
    assert all(len(i) == 16 for i in ids)


async def test_completed_run_is_persisted(tmp_path, fake_runner):
    manager = RunManager(tmp_path, runner=fake_runner)
    run = await manager.create_run(_request())
    assert run.status in (RunStatus.PENDING, RunStatus.RUNNING)
    await manager.wait(run.run_id)
    assert run.status is RunStatus.COMPLETED
    assert run.summary.coverage_count == 5
    assert run.csv.splitlines()[0].startswith("k,x_true[0]")
    steps = await manager.get_steps(run.run_id)
    assert [s["k"] for s in steps] == list(range(5))

    reloaded = RunManager(tmp_path, runner=fake_runner)
    again = await reloaded.get_run(run.run_id)
    assert again.status is RunStatus.COMPLETED
    assert again.csv == run.csv
    assert again.config.run.n == 4


async def test_failed_run_keeps_error(tmp_path, failing_runner):
    manager = RunManager(tmp_path, runner=failing_runner)
    run = await manager.create_run(_request())
    await manager.wait(run.run_id)
    assert run.status is RunStatus.FAILED
    assert run.error.startswith("ReplicateShortfallError")
    assert run.summary is None


async def test_invalid_config_rejected_before_scheduling(tmp_path, fake_runner):
    manager = RunManager(tmp_path, runner=fake_runner)
    with pytest.raises(ConfigError):
        await manager.create_run(_request(iter={"epsilon": -1.0}))
    assert await manager.list_runs() == []


async def test_delete_run(tmp_path, fake_runner):
    manager = RunManager(tmp_path, runner=fake_runner)
    run = await manager.create_run(_request())
    await manager.wait(run.run_id)
    assert await manager.delete_run(run.run_id)
    assert await manager.get_run(run.run_id) is None
    assert not await manager.delete_run(run.run_id)
    assert RunDatabase(tmp_path / "runs.db").load_run(run.run_id) is None


def test_interrupted_runs_marked_failed(tmp_path, fake_runner):
    db = RunDatabase(tmp_path / "runs.db")
    stale = Run("abc123", StudyKind.NONLINEAR, load_config(preset="tanh-reduced"), status=RunStatus.RUNNING)
    db.save_run(stale.to_dict())

    manager = RunManager(tmp_path, runner=fake_runner)
    run = manager._runs["abc123"]
    assert run.status is RunStatus.FAILED
    assert "restart" in run.error
    assert db.load_run("abc123")["status"] == "failed"


def test_run_dict_round_trip():
    run = Run("r1", StudyKind.LINEAR, load_config(preset="linear", overrides={"iter": {"scheme": "newton"}}))
    restored = Run.from_dict(run.to_dict())
    assert restored.config == run.config
    assert restored.status is RunStatus.PENDING
    assert restored.created_at == run.created_at
