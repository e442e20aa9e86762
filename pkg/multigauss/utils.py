"""Utils module for multigauss: environment, log filtering and result writers."""

from __future__ import annotations

import json
import logging
import os
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any, overload

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_HASHSALT: str = "multigauss"


@overload
def get_env(key: str, default: str) -> str: ...


@overload
def get_env(key: str, default: None = None) -> str | None: ...


def get_env(key: str, default: str | None = None) -> str | None:
    """Get the value of an environment variable.

    Blank values count as unset, so ``MULTIGAUSS_CONFIG=`` disables the config
    file instead of naming an empty path.

    Args:
        key: Name of the environment variable.
        default: Value returned when the variable is unset or blank.

    Returns:
        Value of the environment variable or the default value.
    """
    value: str = os.getenv(key, "").strip()
    return value or default


class LogFilter(logging.Filter):
    """Thin out per-trial records of campaign loops.

    Records logged with ``extra={"trial": i}`` pass only when ``i`` is a
    multiple of ``every``; all other records pass.
    """

    def __init__(self, every: int = 10) -> None:
        """Keep one trial record in ``every``."""
        super().__init__()
        self.every = max(1, int(every))

    def filter(self, record: logging.LogRecord) -> bool:
        """Return False to drop the record."""
        trial = getattr(record, "trial", None)
        return trial is None or int(trial) % self.every == 0


def _cell(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(
    path: Path,
    header: Mapping[str, Any],
    columns: Sequence[str],
    rows: Sequence[Sequence[Any]],
) -> Path:
    """Write a CSV file with ``# key=value`` header lines.

    Floats are printed with 17 significant digits so identical runs give
    identical bytes.

    Args:
        path: Destination file.
        header: Parameters written above the column row, in sorted order.
        columns: Column names.
        rows: Data rows, each as long as ``columns``.

    Returns:
        Path: The written file.

    Raises:
        ValueError: If a row has the wrong length.
    """
    lines = [f"# {key}={_cell(header[key])}" for key in sorted(header)]
    lines.append(",".join(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(
                f"Row of length {len(row)} does not match {len(columns)} columns"
            )
        lines.append(",".join(_cell(v) for v in row))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def write_json(path: Path, data: Mapping[str, Any]) -> Path:
    """Write ``data`` as indented JSON with sorted keys."""
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(data, sort_keys=True, indent=2, default=_jsonable)
    path.write_text(text + "\n", encoding="utf-8")
    return path


def plot_series(
    path: Path,
    x: Sequence[float],
    y: Sequence[float],
    yerr: Sequence[float] | None = None,
    *,
    xlabel: str = "",
    ylabel: str = "",
    title: str = "",
    reference: float | None = None,
    logx: bool = False,
) -> Path:
    """Save a line plot with optional error bars as SVG.

    The SVG id salt is fixed and the date is left out, so the file depends
    only on the data.
    """
    plt.rcParams["svg.hashsalt"] = SVG_HASHSALT
    fig, ax = plt.subplots(figsize=(6, 4))
    try:
        ax.errorbar(x, y, yerr=yerr, marker="o", capsize=3)
        if reference is not None:
            ax.axhline(reference, color="gray", linestyle="--")
        if logx:
            ax.set_xscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.grid(True, alpha=0.3)
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
    return path
