"""Per-step CSV, JSON report and SVG plots of a study."""

import csv
import io
import logging
from pathlib import Path

from .model import Trajectory
from .models import RunReport, StudyKind

logger = logging.getLogger("mlsmooth.output")

VECTOR_COLUMNS = (
    "x_true",
    "xhat_filt",
    "xhat_rts",
    "xhat_smc",
    "sigma_theory",
    "sigma_hat",
    "ci_lo",
    "ci_hi",
)
EXTRA_COLUMNS = ("s_hat", "xhat_ml")

CSV_NAME = "table.csv"
REPORT_NAME = "report.json"
TRAJECTORY_NAME = "trajectory.csv"


def _fmt(value: float) -> str:
    return format(value, ".17g")


def csv_header(state_dim: int) -> list[str]:
    header = ["k"]
    header += [f"{name}[{i}]" for name in VECTOR_COLUMNS for i in range(state_dim)]
    header.append("converged")
    header += [f"{name}[{i}]" for name in EXTRA_COLUMNS for i in range(state_dim)]
    return header


def render_csv(report: RunReport) -> str:
    """The per-step table; identical config and seed give identical text."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(report.state_dim))
    for row in report.rows:
        line = [str(row.k)]
        for name in VECTOR_COLUMNS:
            line += [_fmt(v) for v in getattr(row, name)]
        line.append("1" if row.converged else "0")
        for name in EXTRA_COLUMNS:
            line += [_fmt(v) for v in getattr(row, name)]
        writer.writerow(line)
    return buf.getvalue()


def write_csv(report: RunReport, out_dir: Path) -> Path:
    path = out_dir / CSV_NAME
    path.write_text(render_csv(report))
    return path


def write_trajectory(traj: Trajectory, out_dir: str | Path) -> Path:
    """k, x[i], y[j] per step."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p, q = traj.states.shape[1], traj.observations.shape[1]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["k"] + [f"x[{i}]" for i in range(p)] + [f"y[{j}]" for j in range(q)])
    for k in range(traj.horizon + 1):
        writer.writerow([str(k)] + [_fmt(v) for v in traj.states[k]] + [_fmt(v) for v in traj.observations[k]])
    path = out / TRAJECTORY_NAME
    path.write_text(buf.getvalue())
    return path


def write_report(report: RunReport, out_dir: Path) -> Path:
    path = out_dir / REPORT_NAME
    path.write_text(report.model_dump_json(indent=2, by_alias=True))
    return path


def _column(report: RunReport, name: str, i: int) -> list[float]:
    return [getattr(row, name)[i] for row in report.rows]


def write_plots(report: RunReport, out_dir: Path) -> list[Path]:
    """Standard-error and trajectory panels, one SVG per state component.

    Returns no paths (and warns) when matplotlib is not installed.
    """
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib_missing plots_skipped dir=%s", out_dir)
        return []

    steps = [row.k for row in report.rows]
    written: list[Path] = []
    for i in range(report.state_dim):
        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.plot(steps, _column(report, "sigma_hat", i), label="estimated std. error")
        if report.study is StudyKind.LINEAR:
            ax.plot(steps, _column(report, "sigma_theory", i), "--", label="theoretical std. error")
        else:
            ax.plot(steps, _column(report, "s_hat", i), "--", label="sample std. error")
        ax.set_xlabel("k")
        ax.legend()
        path = out_dir / f"std_errors_{i}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)

        fig, ax = plt.subplots(figsize=(7, 3.5))
        ax.plot(steps, _column(report, "x_true", i), "k", label="true state")
        ax.plot(steps, _column(report, "xhat_filt", i), ":", label="filter")
        if report.study is StudyKind.LINEAR:
            ax.plot(steps, _column(report, "xhat_rts", i), "-.", label="RTS smoother")
        else:
            ax.plot(steps, _column(report, "xhat_ml", i), "--", label="ML state estimate")
        ax.plot(steps, _column(report, "xhat_smc", i), label="ML smoother")
        ax.fill_between(steps, _column(report, "ci_lo", i), _column(report, "ci_hi", i), alpha=0.2, label="95% CI")
        ax.set_xlabel("k")
        ax.legend()
        path = out_dir / f"trajectory_{i}.svg"
        fig.savefig(path, format="svg")
        plt.close(fig)
        written.append(path)
    return written


def write_outputs(report: RunReport, out_dir: str | Path, plots: bool = True) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [write_csv(report, out), write_report(report, out)]
    if plots:
        paths += write_plots(report, out)
    logger.info("outputs_written dir=%s files=%d", out, len(paths))
    return paths
