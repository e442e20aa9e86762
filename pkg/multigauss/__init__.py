"""Multiscale toolkit for the two-dimensional Discrete Gaussian model.

Only package metadata lives here; the numerical modules are imported by
their own paths, e.g. ``multigauss.spectral`` or ``multigauss.dgmc``.
"""

from __future__ import annotations

import importlib.metadata
from functools import cache
from pathlib import Path

import toml

__app_name__ = "multigauss"
__description__ = "Multiscale toolkit for the two-dimensional Discrete Gaussian model"

PYPROJECT: Path = Path(__file__).resolve().parent.parent / "pyproject.toml"


@cache
def get_package_version() -> str:
    """Installed version, or the one declared in a source checkout.

    Returns:
        str: The version string, ``"unknown"`` when neither source has one.
    """
    try:
        return importlib.metadata.version(__app_name__)
    except importlib.metadata.PackageNotFoundError:
        pass

    if not PYPROJECT.is_file():
        return "unknown"
    poetry = toml.load(PYPROJECT).get("tool", {}).get("poetry", {})
    return str(poetry.get("version", "unknown"))


__version__ = f"v{get_package_version()}"

__all__: list[str] = [
    "__app_name__",
    "__description__",
    "__version__",
    "get_package_version",
]
