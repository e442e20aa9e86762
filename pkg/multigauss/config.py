"""Configuration module for multigauss."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Any

from multigauss.errors import ConfigError, LatticeError
from multigauss.lattice import StepDistribution
from multigauss.utils import get_env


class LogLevel(str, Enum):
    """Log level enumeration."""

    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


class Experiment(str, Enum):
    """Experiment identifiers accepted by the CLI."""

    DECOMPOSE = "decompose"
    SCHEDULE = "schedule"
    CTILDE_LIMIT = "ctilde-limit"
    REBLOCKING_CHECK = "reblocking-check"
    RG_CONSISTENCY = "rg-consistency"
    GINIBRE = "ginibre"
    SCALING_LIMIT = "scaling-limit"
    ZN_RATIO = "zn-ratio"
    REGULATOR_FALSIFY = "regulator-falsify"


class ProfileKind(str, Enum):
    """Radial profiles ``g`` whose derivative ``f = ∂_i g`` is the test function."""

    GAUSSIAN_DERIVATIVE = "gaussian-derivative"
    POLYNOMIAL_BUMP_DERIVATIVE = "polynomial-bump-derivative"


# Keys of the ``f`` descriptor and the values used when one is left out.
TEST_FUNCTION_DEFAULTS: dict[str, Any] = {
    "kind": ProfileKind.GAUSSIAN_DERIVATIVE.value,
    "width": 1.0,
    "direction": 1,
    "amplitude": 1.0,
}


@dataclass
class RuntimeConfig:
    """Process-level settings loaded from environment variables."""

    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    log_level: LogLevel = LogLevel.INFO
    output_dir: str = "results"
    min_ess_fraction: float = 0.1

    @classmethod
    def from_env(cls) -> RuntimeConfig:
        """Load configuration from environment variables.

        Returns:
            RuntimeConfig: Runtime configuration instance.

        Raises:
            ValueError: If an environment variable is invalid.
        """
        return cls(
            threads=_get_int_env("MULTIGAUSS_THREADS", os.cpu_count() or 1),
            log_level=_get_log_level_env("MULTIGAUSS_LOG_LEVEL", LogLevel.INFO),
            output_dir=get_env("MULTIGAUSS_OUTPUT_DIR", "results"),
            min_ess_fraction=_get_float_env("MULTIGAUSS_MIN_ESS", 0.1),
        )

    def validate(self) -> list[str]:
        """Validate configuration and return list of errors.

        Returns:
            list[str]: List of validation error messages.
        """
        errors: list[str] = []

        if self.threads < 1:
            errors.append("MULTIGAUSS_THREADS must be at least 1")

        if not self.output_dir:
            errors.append("MULTIGAUSS_OUTPUT_DIR must not be empty")

        if not 0 < self.min_ess_fraction <= 1:
            errors.append("MULTIGAUSS_MIN_ESS must lie in (0, 1]")

        return errors


_INTEGER_KEYS: tuple[str, ...] = (
    "sweeps",
    "chains",
    "trials",
    "samples",
    "zeta_samples",
    "truncation",
    "q_max",
    "M",
    "seed",
)

# Per-experiment defaults, applied before the config file and flags.
EXPERIMENT_DEFAULTS: dict[Experiment, dict[str, Any]] = {
    Experiment.DECOMPOSE: {"L": 4, "N": 3},
    Experiment.SCHEDULE: {
        "L": 2,
        "N": 10,
        "f": {"kind": "polynomial-bump-derivative", "width": 1.0},
        "eps": [0.125, 0.0625, 0.03125],
    },
    Experiment.CTILDE_LIMIT: {
        "L": 2,
        "N": 10,
        "m2": 0.0,
        "eps": [0.125, 0.0625, 0.03125],
    },
    Experiment.REBLOCKING_CHECK: {"L": 2, "N": 2, "trials": 100},
    Experiment.RG_CONSISTENCY: {"L": 2, "N": 2, "trials": 100},
    Experiment.GINIBRE: {"L": 3, "N": 1, "beta": 2.0, "truncation": 3},
    Experiment.SCALING_LIMIT: {
        "L": 4,
        "N": 3,
        "beta": 6.0,
        "f": {"kind": "polynomial-bump-derivative", "width": 1.0},
        "eps": [0.25, 0.125],
        "sweeps": 4000,
    },
    Experiment.ZN_RATIO: {
        "L": 4,
        "N": 3,
        "beta": 6.0,
        "m2": 0.0,
        "f": {"kind": "polynomial-bump-derivative", "width": 1.0},
        "eps": [0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.125],
        "sweeps": 4000,
    },
    Experiment.REGULATOR_FALSIFY: {"L": 2, "N": 3, "trials": 10_000, "M": 1},
}


@dataclass
class ExperimentConfig:
    """Fully resolved parameters of one experiment run."""

    experiment: Experiment = Experiment.DECOMPOSE
    L: int = 4
    N: int = 3
    J: str | list[list[int]] = "nn"
    beta: float = 2.0
    s: float = 0.0
    gamma: float = 0.1
    m2: float = 1.0
    f: dict[str, Any] = field(default_factory=lambda: dict(TEST_FUNCTION_DEFAULTS))
    eps: list[float] = field(default_factory=lambda: [0.125, 0.0625, 0.03125])
    sweeps: int = 2000
    chains: int = 64
    trials: int = 100
    samples: int = 50
    zeta_samples: int = 20
    truncation: int = 3
    q_max: int = 5
    M: int = 1
    transition_width: float = 1.0
    adjacency: str = "linf"
    regulator: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    out: str | None = None
    plots: bool = True

    @classmethod
    def keys(cls) -> set[str]:
        """Names accepted in config files and as ``--key`` flags."""
        return {f.name for f in fields(cls)}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ExperimentConfig:
        """Build a config from a mapping, applying experiment defaults first.

        Args:
            data: Mapping of config keys to values.

        Returns:
            ExperimentConfig: The merged configuration.

        Raises:
            ConfigError: If a key is unknown or a value has the wrong type.
        """
        unknown: set[str] = set(data) - cls.keys()
        if unknown:
            raise ConfigError(
                f"Unknown config keys: {', '.join(sorted(unknown))}",
                invariant="unknown-key",
            )

        try:
            experiment = Experiment(data.get("experiment", Experiment.DECOMPOSE))
        except ValueError as e:
            valid = ", ".join(exp.value for exp in Experiment)
            raise ConfigError(
                f"Experiment must be one of: {valid}", invariant="experiment-id"
            ) from e

        merged: dict[str, Any] = {**EXPERIMENT_DEFAULTS[experiment], **data}
        merged["experiment"] = experiment

        try:
            config = cls(**merged)
            config.L = int(config.L)
            config.N = int(config.N)
            config.beta = float(config.beta)
            config.s = float(config.s)
            config.gamma = float(config.gamma)
            config.m2 = float(config.m2)
            config.eps = [float(e) for e in config.eps]
            config.transition_width = float(config.transition_width)
            for name in _INTEGER_KEYS:
                setattr(config, name, int(getattr(config, name)))
            config.f = _test_function(config.f)
            config.J = _step_descriptor(config.J)
            config.regulator = _regulator_overrides(config.regulator)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid config value: {e}", invariant="type") from e

        if not isinstance(config.plots, bool):
            raise ConfigError("plots must be true or false", invariant="type")

        return config

    @classmethod
    def from_file(cls, path: str | Path, overrides: dict[str, Any]) -> ExperimentConfig:
        """Load a JSON config file and apply flag overrides on top of it.

        Args:
            path: Path of the JSON document.
            overrides: Values taking precedence over the file.

        Returns:
            ExperimentConfig: The merged configuration.

        Raises:
            ConfigError: If the file cannot be parsed.
        """
        try:
            data: dict[str, Any] = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config file {path}: {e}") from e

        if not isinstance(data, dict):
            raise ConfigError("Config file must hold a JSON object", invariant="type")

        return cls.from_dict({**data, **overrides})

    def validate(self) -> list[str]:
        """Validate configuration and return list of errors.

        Returns:
            list[str]: List of validation error messages.
        """
        errors: list[str] = []

        if self.L < 2:
            errors.append("L must be at least 2")

        if self.N < 1:
            errors.append("N must be at least 1")

        if self.beta <= 0:
            errors.append("beta must be positive")

        if self.m2 < 0:
            errors.append("m2 must be nonnegative")

        if not 0 <= self.gamma < 1 / 3:
            errors.append("gamma must lie in [0, 1/3)")

        if any(not 0 < e < 1 for e in self.eps):
            errors.append("every eps must lie in (0, 1)")

        for name in (
            "sweeps",
            "chains",
            "trials",
            "samples",
            "zeta_samples",
            "q_max",
            "M",
        ):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be at least 1")

        if self.truncation < 0:
            errors.append("truncation must be nonnegative")

        if self.transition_width <= 0:
            errors.append("transition_width must be positive")

        if self.adjacency not in ("linf", "l1"):
            errors.append("adjacency must be 'linf' or 'l1'")

        try:
            StepDistribution.from_descriptor(self.J)
        except LatticeError as e:
            errors.append(f"J is invalid: {e}")

        errors.extend(_test_function_errors({**TEST_FUNCTION_DEFAULTS, **self.f}))

        if self.L >= 2:
            try:
                RegulatorParams.default(self.L, self.M).with_overrides(self.regulator)
            except (ConfigError, TypeError) as e:
                errors.append(str(e))

        return errors

    def resolved(self) -> dict[str, Any]:
        """Return the JSON-ready resolved configuration."""
        data: dict[str, Any] = asdict(self)
        data["experiment"] = self.experiment.value
        return data


@dataclass(frozen=True)
class RegulatorParams:
    """Parameters of the regulators and activity norms.

    Attributes:
        kappa: Overall regulator strength ``κ_L``.
        c1: Gradient coefficient of the change-of-scale recipe.
        c2: Boundary coefficient, ``0 < c2 < 1``.
        c4: Strong-regulator coefficient.
        c_w: Coefficient of ``w_j``.
        h: Derivative weight of the ``T_j`` seminorm.
        A: Large-set regulator.
        r: Charge-decay parameter.
        beta: Inverse temperature of the periodic activities.
        M: Number of fractional scales per scale.
    """

    kappa: float
    c1: float = 1.0
    c2: float = 1.0 / 30.0
    c4: float = 60.0
    c_w: float = 1.0 / 120.0
    h: float = 1.0
    A: float = 1024.0
    r: float = 1.0
    beta: float = 1.0
    M: int = 1

    @classmethod
    def default(cls, L: int, M: int = 1) -> RegulatorParams:
        """Defaults for block base ``L``.

        ``κ_L = 1/log L``, ``c_2 = 1/30``, ``τ = c_1/c_2`` and
        ``c_4 = max(2c_1, 2τc_1, 2c_2)``.
        """
        c1, c2 = 1.0, 1.0 / 30.0
        tau = c1 / c2
        return cls(
            kappa=1.0 / math.log(L),
            c1=c1,
            c2=c2,
            c4=max(2 * c1, 2 * tau * c1, 2 * c2),
            c_w=c2 / 4,
            M=M,
        )

    def with_overrides(self, overrides: dict[str, float]) -> RegulatorParams:
        """Return a copy with some parameters replaced.

        Raises:
            ConfigError: If a key is unknown or a value is out of range.
        """
        unknown = set(overrides) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(
                f"Unknown regulator parameters: {', '.join(sorted(unknown))}",
                invariant="unknown-key",
            )
        params = replace(self, **overrides)
        errors = params.validate()
        if errors:
            raise ConfigError("; ".join(errors), invariant="regulator-params")
        return params

    def validate(self) -> list[str]:
        """Validate configuration and return list of errors.

        Returns:
            list[str]: List of validation error messages.
        """
        errors: list[str] = []

        for f in fields(self):
            if getattr(self, f.name) <= 0:
                errors.append(f"regulator parameter {f.name} must be positive")

        if self.c2 >= 1:
            errors.append("regulator parameter c2 must be below 1")

        return errors


_REGULATOR_INTEGER_KEYS: tuple[str, ...] = ("M",)


def _test_function(descriptor: Any) -> dict[str, Any]:
    """Complete an ``f`` descriptor with the default values.

    Raises:
        ConfigError: If the descriptor has unknown keys.
        TypeError: If it is not a mapping.
        ValueError: If a value cannot be coerced.
    """
    if not isinstance(descriptor, dict):
        raise TypeError("f must be an object")
    unknown: set[str] = set(descriptor) - set(TEST_FUNCTION_DEFAULTS)
    if unknown:
        raise ConfigError(
            f"Unknown test function keys: {', '.join(sorted(unknown))}",
            invariant="unknown-key",
        )
    values: dict[str, Any] = {**TEST_FUNCTION_DEFAULTS, **descriptor}
    return {
        "kind": str(values["kind"]),
        "width": float(values["width"]),
        "direction": int(values["direction"]),
        "amplitude": float(values["amplitude"]),
    }


def _test_function_errors(descriptor: dict[str, Any]) -> list[str]:
    errors: list[str] = []

    kinds = [kind.value for kind in ProfileKind]
    if descriptor["kind"] not in kinds:
        errors.append(f"f kind must be one of: {', '.join(kinds)}")

    if descriptor["width"] <= 0:
        errors.append("f width must be positive")

    if descriptor["direction"] not in (1, 2):
        errors.append("f direction must be 1 or 2")

    return errors


def _step_descriptor(descriptor: Any) -> str | list[list[int]]:
    """Normalise ``J`` to a name or a list of integer pairs.

    Raises:
        TypeError: If ``J`` has neither form.
    """
    if isinstance(descriptor, str):
        return descriptor
    message = "J must be a name or a list of integer pairs"
    if not isinstance(descriptor, list):
        raise TypeError(message)
    pairs: list[list[int]] = []
    for point in descriptor:
        if not isinstance(point, (list, tuple)) or len(point) != 2:
            raise TypeError(message)
        pairs.append([int(point[0]), int(point[1])])
    return pairs


def _regulator_overrides(overrides: Any) -> dict[str, float]:
    """Coerce regulator overrides to numbers.

    Raises:
        TypeError: If ``regulator`` is not a mapping.
        ValueError: If a value is not a number.
    """
    if not isinstance(overrides, dict):
        raise TypeError("regulator must be an object")
    return {
        key: int(value) if key in _REGULATOR_INTEGER_KEYS else float(value)
        for key, value in overrides.items()
    }


def _get_int_env(key: str, default: int) -> int:
    """Get integer environment variable.

    Args:
        key: Environment variable name.
        default: Default value if not set.

    Returns:
        int: Environment variable value or default.

    Raises:
        ValueError: If value cannot be converted to int.
    """
    value: str | None = get_env(key)
    if value is None:
        return default
    try:
        return int(value)
    except ValueError as e:
        raise ValueError(f"Environment variable '{key}' must be an integer") from e


def _get_float_env(key: str, default: float) -> float:
    """Get float environment variable.

    Args:
        key: Environment variable name.
        default: Default value if not set.

    Returns:
        float: Environment variable value or default.

    Raises:
        ValueError: If value cannot be converted to float.
    """
    value: str | None = get_env(key)
    if value is None:
        return default
    try:
        return float(value)
    except ValueError as e:
        raise ValueError(f"Environment variable '{key}' must be a number") from e


def _get_log_level_env(key: str, default: LogLevel) -> LogLevel:
    """Get log level environment variable.

    Args:
        key: Environment variable name.
        default: Default log level.

    Returns:
        LogLevel: Log level enumeration value.

    Raises:
        ValueError: If value is not a valid log level.
    """
    value: str | None = get_env(key)
    if value is None:
        return default
    try:
        return LogLevel(value.upper())
    except ValueError as e:
        valid_levels = ", ".join(level.value for level in LogLevel)
        raise ValueError(
            f"Environment variable '{key}' must be one of: {valid_levels}"
        ) from e


# Global configuration instance (loaded lazily)
_config: RuntimeConfig | None = None


def get_config() -> RuntimeConfig:
    """Get the runtime configuration singleton.

    Returns:
        RuntimeConfig: Runtime configuration instance.
    """
    global _config
    if _config is None:
        _config = RuntimeConfig.from_env()
    return _config


def reset_config() -> None:
    """Reset the configuration singleton (useful for testing)."""
    global _config
    _config = None
