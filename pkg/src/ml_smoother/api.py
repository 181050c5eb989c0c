"""FastAPI application exposing study runs."""

import logging
import os
import time
from contextlib import asynccontextmanager

from fastapi import FastAPI, HTTPException, Request, Response

from . import __version__
from .config import configure_logging
from .errors import SmootherError
from .models import CreateRunRequest, RunInfo, RunListResponse, RunStatus
from .runs import RunManager, get_run_manager as _current_manager, set_run_manager

http_logger = logging.getLogger("mlsmooth.http")

API_PORT = int(os.environ.get("MLSMOOTH_API_PORT", "8000"))


@asynccontextmanager
async def lifespan(app: FastAPI):
    configure_logging()
    manager = _current_manager() or RunManager()
    set_run_manager(manager)
    http_logger.info("service_started runs_dir=%s", manager.runs_dir)
    yield
    await manager.shutdown()
    set_run_manager(None)


app = FastAPI(
    title="ml-smoother",
    description="Maximum-likelihood state smoothing studies",
    version=__version__,
    lifespan=lifespan,
)


def _run_id_of(path: str) -> str | None:
    """`/runs/{run_id}[/...]` -> run_id."""
    prefix, _, rest = path.partition("/runs/")
    if prefix or not rest:
        return None
    return rest.split("/", 1)[0]


def _level_for(status: int) -> int:
    if status >= 500:
        return logging.ERROR
    return logging.WARNING if status >= 400 else logging.INFO


@app.middleware("http")
async def log_http_requests(request: Request, call_next):
    start = time.perf_counter()
    path = request.url.path
    run_id = _run_id_of(path)
    try:
        response = await call_next(request)
    except Exception:
        http_logger.error(
            "request_failed method=%s path=%s run=%s duration_ms=%.1f",
            request.method, path, run_id, (time.perf_counter() - start) * 1000,
        )
        raise
    http_logger.log(
        _level_for(response.status_code),
        "request_completed method=%s path=%s status=%d run=%s duration_ms=%.1f",
        request.method, path, response.status_code, run_id, (time.perf_counter() - start) * 1000,
    )
    return response


def get_run_manager() -> RunManager:
    manager = _current_manager()
    if manager is None:
        raise HTTPException(status_code=503, detail="Service not initialized")
    return manager


@app.post("/runs", response_model=RunInfo, tags=["Runs"])
async def create_run(request: CreateRunRequest) -> RunInfo:
    """Validate the configuration and start the study in the background."""
    manager = get_run_manager()
    try:
        run = await manager.create_run(request)
    except SmootherError as e:
        raise HTTPException(status_code=422, detail=str(e))
    return run.get_info()


@app.get("/runs", response_model=RunListResponse, tags=["Runs"])
async def list_runs() -> RunListResponse:
    manager = get_run_manager()
    runs = await manager.list_runs()
    return RunListResponse(runs=[r.get_info() for r in runs], total=len(runs))


@app.get("/runs/{run_id}", response_model=RunInfo, tags=["Runs"])
async def get_run(run_id: str) -> RunInfo:
    manager = get_run_manager()
    run = await manager.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return run.get_info()


@app.get("/runs/{run_id}/table.csv", tags=["Runs"])
async def get_run_table(run_id: str) -> Response:
    manager = get_run_manager()
    run = await manager.get_run(run_id)
    if not run:
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    if run.status is not RunStatus.COMPLETED or run.csv is None:
        raise HTTPException(status_code=409, detail=f"Run {run_id} is {run.status.value}")
    return Response(content=run.csv, media_type="text/csv")


@app.delete("/runs/{run_id}", tags=["Runs"])
async def delete_run(run_id: str) -> dict:
    manager = get_run_manager()
    if not await manager.delete_run(run_id):
        raise HTTPException(status_code=404, detail=f"Run {run_id} not found")
    return {"status": "deleted", "run_id": run_id}


@app.get("/system/status", tags=["System"])
async def get_system_status() -> dict:
    """Run counts by status."""
    manager = get_run_manager()
    runs = await manager.list_runs()
    counts = {status.value: 0 for status in RunStatus}
    for run in runs:
        counts[run.status.value] += 1
    return {
        "version": __version__,
        "runs_dir": str(manager.runs_dir),
        "total_runs": len(runs),
        "runs_by_status": counts,
    }


def serve(host: str = "0.0.0.0", port: int = API_PORT) -> None:
    """Run the server using uvicorn."""
    import uvicorn

    uvicorn.run("ml_smoother.api:app", host=host, port=port)
