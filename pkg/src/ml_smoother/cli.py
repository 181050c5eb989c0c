"""Command-line entry point: ml-smoother {simulate,linear,nonlinear,check,serve}."""

import argparse
import logging
import sys
from pathlib import Path
from typing import Any

from .config import ExperimentConfig, configure_logging, load_config
from .errors import ConfigError, SmootherError
from .experiments import run_linear_study, run_nonlinear_study, simulate_trajectory
from .oracles import run_oracle_suite
from .output import write_outputs, write_trajectory

logger = logging.getLogger("mlsmooth.cli")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2

DEFAULT_PRESETS = {
    "simulate": "linear",
    "linear": "linear",
    "nonlinear": "tanh",
    "check": "linear-reduced",
}


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--preset", help="Named preset applied before the config file")
    parser.add_argument("--seed", type=int, help="Master seed")
    parser.add_argument("--particles", type=int, help="Particles per filter pass (M)")
    parser.add_argument("--replicates", type=int, help="Repeated-sampling replicates (N)")
    parser.add_argument("--scheme", choices=["newton", "em_gradient", "bhhh"], help="Smoother step")
    parser.add_argument("--horizon", type=int, help="Horizon n")
    parser.add_argument("--out", help="Output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ml-smoother", description="Maximum-likelihood state smoothing")
    parser.add_argument("--log-level", help="Overrides MLSMOOTH_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("simulate", "Simulate a trajectory and write trajectory.csv"),
        ("linear", "Linear study: Kalman, RTS and the particle ML smoother"),
        ("nonlinear", "Nonlinear study on the tanh model"),
        ("check", "Run the numerical oracle suite"),
    ):
        _add_config_flags(sub.add_parser(name, help=help_text))
    serve = sub.add_parser("serve", help="Start the HTTP run service")
    serve.add_argument("--host", default="0.0.0.0")
    serve.add_argument("--port", type=int, default=8000)
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}

    def put(section: str, key: str, value: Any) -> None:
        if value is not None:
            out.setdefault(section, {})[key] = value

    put("run", "seed", args.seed)
    put("run", "M", args.particles)
    put("run", "N", args.replicates)
    put("run", "n", args.horizon)
    put("iter", "scheme", args.scheme)
    put("out", "dir", args.out)
    return out


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    preset = args.preset
    if preset is None and args.config is None:
        preset = DEFAULT_PRESETS[args.command]
    return load_config(args.config, preset=preset, overrides=_overrides(args))


def _run(args: argparse.Namespace) -> int:
    if args.command == "serve":
        from .api import serve

        serve(host=args.host, port=args.port)
        return EXIT_OK

    cfg = resolve_config(args)
    if args.command == "simulate":
        _, traj = simulate_trajectory(cfg)
        path = write_trajectory(traj, cfg.out.dir)
        print(f"wrote {path}")
        return EXIT_OK

    if args.command == "check":
        report = run_oracle_suite(cfg)
        out = Path(cfg.out.dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracles.json").write_text(report.model_dump_json(indent=2))
        for c in report.checks:
            mark = "PASS" if c.passed else "FAIL"
            print(f"{mark} {c.name} value={c.value:.3e} tol={c.tolerance:.3e} {c.detail}".rstrip())
        if not report.passed:
            print(f"failed checks: {', '.join(report.failed)}", file=sys.stderr)
            return EXIT_FAILURE
        return EXIT_OK

    study = run_linear_study if args.command == "linear" else run_nonlinear_study
    report = study(cfg)
    paths = write_outputs(report, cfg.out.dir, plots=cfg.out.plots)
    s = report.summary
    print(
        f"coverage {s.coverage_count}/{len(report.rows)} steps ({s.coverage_fraction:.3f} of entries), "
        f"convergence {s.convergence_rate:.3f}, files {len(paths)} in {cfg.out.dir}"
    )
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SmootherError as exc:
        logger.error("run_aborted command=%s error=%s", args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
