"""Command-line entry point: parse a config, run one experiment, write artifacts."""

from __future__ import annotations

import argparse
import json
import logging
import logging.config
import sys
import threading
import time
from pathlib import Path
from typing import Any

from prometheus_client import CollectorRegistry, Gauge, Info, write_to_textfile
from slugify import slugify

from multigauss import __app_name__, __description__, __version__
from multigauss.config import Experiment, ExperimentConfig, RuntimeConfig, get_config
from multigauss.errors import ConfigError, MultigaussError
from multigauss.experiments import ExperimentResult, run_experiment
from multigauss.utils import LogFilter, get_env, plot_series, write_csv, write_json

log: logging.Logger = logging.getLogger("multigauss")

# Prometheus registry and run metrics
registry = CollectorRegistry()

run_duration_gauge = Gauge(
    "multigauss_run_duration_seconds",
    "Wall-clock duration of the last run in seconds",
    registry=registry,
)

run_success_gauge = Gauge(
    "multigauss_run_success",
    "Whether the last run finished without error (1) or not (0)",
    registry=registry,
)

max_residual_gauge = Gauge(
    "multigauss_max_residual",
    "Largest identity residual reported by the experiment",
    ["experiment"],
    registry=registry,
)

trials_gauge = Gauge(
    "multigauss_trials_total",
    "Number of trials or sweep points of the experiment",
    ["experiment"],
    registry=registry,
)

build_info = Info(
    "multigauss_build",
    "Version and experiment of the run",
    registry=registry,
)

metric_lock = threading.Lock()


def _parse_value(raw: str) -> Any:
    """Decode a flag value as JSON, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_args(
    argv: list[str] | None = None,
) -> tuple[argparse.Namespace, dict[str, Any]]:
    """Split the command line into fixed options and ``--key value`` overrides.

    Args:
        argv: Arguments without the program name; defaults to ``sys.argv``.

    Returns:
        tuple: Parsed fixed options and the override mapping.

    Raises:
        ConfigError: If an override flag has no value.
    """
    parser = argparse.ArgumentParser(
        prog=__app_name__, description=__description__, allow_abbrev=False
    )
    parser.add_argument("experiment", choices=[e.value for e in Experiment])
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="Random seed")
    parser.add_argument("--out", help="Output directory")
    parser.add_argument(
        "--version", action="version", version=f"%(prog)s {__version__}"
    )
    args, rest = parser.parse_known_args(argv)

    overrides: dict[str, Any] = {}
    i = 0
    while i < len(rest):
        flag = rest[i]
        if not flag.startswith("--"):
            raise ConfigError(f"Unexpected argument {flag!r}", invariant="flag-syntax")
        key = flag[2:]
        if "=" in key:
            key, raw = key.split("=", 1)
            i += 1
        elif i + 1 < len(rest):
            raw = rest[i + 1]
            i += 2
        else:
            raise ConfigError(f"Flag {flag} needs a value", invariant="flag-syntax")
        overrides[key.replace("-", "_")] = _parse_value(raw)
    return args, overrides


def build_config(
    args: argparse.Namespace, overrides: dict[str, Any]
) -> ExperimentConfig:
    """Merge defaults, config file, flags, ``--seed`` and ``--out`` in that order.

    Raises:
        ConfigError: If the merged config is invalid.
    """
    data: dict[str, Any] = {**overrides, "experiment": args.experiment}
    if args.seed is not None:
        data["seed"] = args.seed
    if args.out is not None:
        data["out"] = args.out

    path = args.config or get_env("MULTIGAUSS_CONFIG", None)
    if path:
        config = ExperimentConfig.from_file(path, data)
    else:
        config = ExperimentConfig.from_dict(data)

    errors = config.validate()
    if errors:
        raise ConfigError("; ".join(errors), invariant="config-valid")
    return config


def run_directory(config: ExperimentConfig, runtime: RuntimeConfig) -> Path:
    """``<out>/<slug of experiment and seed>``."""
    base = Path(config.out or runtime.output_dir)
    return base / slugify(f"{config.experiment.value}-seed-{config.seed}")


def _header_value(value: Any) -> Any:
    if isinstance(value, (dict, list, tuple)):
        return json.dumps(value, sort_keys=True)
    return "" if value is None else value


def write_artifacts(
    config: ExperimentConfig, result: ExperimentResult, out: Path
) -> None:
    """Write ``data.csv``, ``summary.json`` and, if enabled, ``plot.svg``."""
    resolved = config.resolved()
    header = {key: _header_value(value) for key, value in resolved.items()}
    header["version"] = __version__
    write_csv(out / "data.csv", header, result.columns, result.rows)
    write_json(
        out / "summary.json",
        {
            "experiment": config.experiment.value,
            "version": __version__,
            "config": resolved,
            "max_residual": result.max_residual,
            "trials": result.trials,
            "summary": result.summary,
        },
    )
    if config.plots and result.plot is not None and result.plot.x:
        spec = result.plot
        plot_series(
            out / "plot.svg",
            spec.x,
            spec.y,
            spec.yerr,
            xlabel=spec.xlabel,
            ylabel=spec.ylabel,
            title=spec.title,
            reference=spec.reference,
            logx=spec.logx,
        )


def update_metrics(
    experiment: str, duration: float, success: bool, result: ExperimentResult | None
) -> None:
    """Record the outcome of a run in the registry."""
    with metric_lock:
        run_duration_gauge.set(duration)
        run_success_gauge.set(1 if success else 0)
        build_info.info({"version": __version__, "experiment": experiment})
        if result is not None:
            trials_gauge.labels(experiment=experiment).set(result.trials)
            if result.max_residual is not None:
                gauge = max_residual_gauge.labels(experiment=experiment)
                gauge.set(result.max_residual)


def write_error(out: Path, error: BaseException) -> Path:
    """Write ``error.json`` with the error class, violated invariant and message."""
    if isinstance(error, MultigaussError):
        payload = error.to_dict()
    else:
        payload = {
            "error": type(error).__name__,
            "invariant": None,
            "message": str(error),
        }
    return write_json(out / "error.json", payload)


def run(config: ExperimentConfig) -> int:
    """Run one experiment and write its artifacts.

    Args:
        config: Validated experiment configuration.

    Returns:
        int: Exit status; 0 on success, 2 for a module error and 1 otherwise.
    """
    runtime = get_config()
    out = run_directory(config, runtime)
    out.mkdir(parents=True, exist_ok=True)
    experiment = config.experiment.value
    started = time.monotonic()
    log.info("Running %s (seed %d) into %s", experiment, config.seed, out)

    result: ExperimentResult | None = None
    status = 0
    try:
        result = run_experiment(config)
        write_artifacts(config, result, out)
    except MultigaussError as e:
        log.error("%s failed: %s", experiment, e)
        write_error(out, e)
        status = 2
    except Exception as e:
        log.exception("Unexpected error in %s: %s", experiment, e)
        write_error(out, e)
        status = 1

    duration = time.monotonic() - started
    update_metrics(experiment, duration, status == 0, result if status == 0 else None)
    write_to_textfile(str(out / "metrics.prom"), registry)
    log.info("Finished %s in %.2f seconds with status %d", experiment, duration, status)
    return status


def configure_logging(runtime: RuntimeConfig) -> None:
    """Configure the ``multigauss`` loggers from the runtime settings."""
    logging.config.dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "default": {
                    "format": "%(asctime)s %(levelname)s %(name)s %(message)s",
                    "datefmt": "%Y-%m-%d %H:%M:%S",
                },
            },
            "filters": {"trial_filter": {"()": LogFilter, "every": 10}},
            "handlers": {
                "default": {
                    "formatter": "default",
                    "class": "logging.StreamHandler",
                    "stream": "ext://sys.stderr",
                    "filters": ["trial_filter"],
                },
            },
            "loggers": {
                "multigauss": {
                    "handlers": ["default"],
                    "level": runtime.log_level.value,
                    "propagate": False,
                },
            },
        }
    )


def start(argv: list[str] | None = None) -> None:
    """Start the application."""
    try:
        runtime = get_config()
    except ValueError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        sys.exit(1)

    errors: list[str] = runtime.validate()
    if errors:
        for error in errors:
            print(f"Configuration error: {error}", file=sys.stderr)
        sys.exit(1)

    configure_logging(runtime)
    try:
        args, overrides = parse_args(argv)
        config = build_config(args, overrides)
    except ConfigError as e:
        out = Path(_fallback_out(argv) or runtime.output_dir)
        log.error("Invalid configuration: %s", e)
        write_error(out, e)
        log.debug("Configuration failure", exc_info=True)
        sys.exit(2)

    sys.exit(run(config))


def _fallback_out(argv: list[str] | None) -> str | None:
    args = sys.argv[1:] if argv is None else argv
    for i, arg in enumerate(args):
        if arg == "--out" and i + 1 < len(args):
            return args[i + 1]
        if arg.startswith("--out="):
            return arg.split("=", 1)[1]
    return None


if __name__ == "__main__":
    start()
