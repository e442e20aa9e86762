"""Tests for the config module."""

import json
import math
import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

from multigauss.config import (
    EXPERIMENT_DEFAULTS,
    Experiment,
    ExperimentConfig,
    LogLevel,
    RegulatorParams,
    RuntimeConfig,
    _get_float_env,
    _get_int_env,
    _get_log_level_env,
    get_config,
    reset_config,
)
from multigauss.errors import ConfigError


class TestLogLevel(unittest.TestCase):
    """Tests for LogLevel enum."""

    def test_log_levels(self):
        """Test all log levels exist."""
        self.assertEqual(LogLevel.DEBUG.value, "DEBUG")
        self.assertEqual(LogLevel.INFO.value, "INFO")
        self.assertEqual(LogLevel.WARNING.value, "WARNING")
        self.assertEqual(LogLevel.ERROR.value, "ERROR")
        self.assertEqual(LogLevel.CRITICAL.value, "CRITICAL")


class TestExperiment(unittest.TestCase):
    """Tests for Experiment enum."""

    def test_identifiers(self):
        """Test the CLI identifiers of every experiment."""
        self.assertEqual(
            {e.value for e in Experiment},
            {
                "decompose",
                "schedule",
                "ctilde-limit",
                "reblocking-check",
                "rg-consistency",
                "ginibre",
                "scaling-limit",
                "zn-ratio",
                "regulator-falsify",
            },
        )

    def test_every_experiment_has_defaults(self):
        """Test each experiment has a defaults entry."""
        self.assertEqual(set(EXPERIMENT_DEFAULTS), set(Experiment))


class TestRuntimeConfig(unittest.TestCase):
    """Tests for RuntimeConfig dataclass."""

    def setUp(self):
        """Reset config before each test."""
        reset_config()

    def tearDown(self):
        """Reset config after each test."""
        reset_config()

    @patch.dict(os.environ, {}, clear=True)
    def test_from_env_defaults(self):
        """Test defaults when no variable is set."""
        config = RuntimeConfig.from_env()
        self.assertEqual(config.log_level, LogLevel.INFO)
        self.assertEqual(config.output_dir, "results")
        self.assertAlmostEqual(config.min_ess_fraction, 0.1)
        self.assertGreaterEqual(config.threads, 1)

    @patch.dict(
        os.environ,
        {
            "MULTIGAUSS_THREADS": "3",
            "MULTIGAUSS_LOG_LEVEL": "debug",
            "MULTIGAUSS_OUTPUT_DIR": "/tmp/out",
            "MULTIGAUSS_MIN_ESS": "0.25",
        },
        clear=True,
    )
    def test_from_env_custom_values(self):
        """Test loading custom config from environment."""
        config = RuntimeConfig.from_env()
        self.assertEqual(config.threads, 3)
        self.assertEqual(config.log_level, LogLevel.DEBUG)
        self.assertEqual(config.output_dir, "/tmp/out")
        self.assertAlmostEqual(config.min_ess_fraction, 0.25)

    @patch.dict(
        os.environ,
        {"MULTIGAUSS_THREADS": "", "MULTIGAUSS_OUTPUT_DIR": " "},
        clear=True,
    )
    def test_from_env_blank_values(self):
        """Test blank variables fall back to the defaults."""
        config = RuntimeConfig.from_env()
        self.assertEqual(config.output_dir, "results")
        self.assertGreaterEqual(config.threads, 1)
        self.assertEqual(config.validate(), [])

    @patch.dict(os.environ, {"MULTIGAUSS_THREADS": "many"}, clear=True)
    def test_from_env_invalid_threads(self):
        """Test a non-integer thread count raises."""
        with self.assertRaises(ValueError):
            RuntimeConfig.from_env()

    def test_validate_success(self):
        """Test validation with valid config."""
        self.assertEqual(RuntimeConfig(threads=2).validate(), [])

    def test_validate_errors(self):
        """Test validation reports every bad field."""
        errors = RuntimeConfig(threads=0, output_dir="", min_ess_fraction=0).validate()
        self.assertTrue(any("MULTIGAUSS_THREADS" in e for e in errors))
        self.assertTrue(any("MULTIGAUSS_OUTPUT_DIR" in e for e in errors))
        self.assertTrue(any("MULTIGAUSS_MIN_ESS" in e for e in errors))


class TestExperimentConfig(unittest.TestCase):
    """Tests for ExperimentConfig."""

    def test_defaults_applied_per_experiment(self):
        """Test experiment defaults sit under explicit values."""
        config = ExperimentConfig.from_dict({"experiment": "ginibre"})
        self.assertEqual(config.experiment, Experiment.GINIBRE)
        self.assertEqual((config.L, config.N), (3, 1))
        self.assertEqual(config.truncation, 3)

        config = ExperimentConfig.from_dict({"experiment": "ginibre", "L": 2})
        self.assertEqual(config.L, 2)

    def test_values_are_coerced(self):
        """Test numeric strings and ints are coerced to the field types."""
        config = ExperimentConfig.from_dict(
            {"experiment": "decompose", "beta": 3, "sweeps": "100", "eps": [1, 0.5]}
        )
        self.assertIsInstance(config.beta, float)
        self.assertEqual(config.sweeps, 100)
        self.assertEqual(config.eps, [1.0, 0.5])

    def test_unknown_key(self):
        """Test unknown keys are rejected."""
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict({"experiment": "decompose", "bogus": 1})
        self.assertEqual(context.exception.invariant, "unknown-key")

    def test_unknown_experiment(self):
        """Test an unknown experiment id is rejected."""
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict({"experiment": "nope"})
        self.assertEqual(context.exception.invariant, "experiment-id")

    def test_bad_type(self):
        """Test a value that cannot be coerced is rejected."""
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict({"experiment": "decompose", "L": "four"})
        self.assertEqual(context.exception.invariant, "type")

    def test_test_function_completed(self):
        """Test the f descriptor is completed with its defaults."""
        config = ExperimentConfig.from_dict(
            {"f": {"kind": "polynomial-bump-derivative", "width": "0.5"}}
        )
        self.assertEqual(
            config.f,
            {
                "kind": "polynomial-bump-derivative",
                "width": 0.5,
                "direction": 1,
                "amplitude": 1.0,
            },
        )
        self.assertEqual(config.resolved()["f"]["direction"], 1)

    def test_test_function_unknown_key(self):
        """Test a misspelled f key is rejected."""
        with self.assertRaises(ConfigError) as context:
            ExperimentConfig.from_dict(
                {
                    "experiment": "scaling-limit",
                    "f": {"kind": "gaussian-derivative", "widht": 0.1},
                }
            )
        self.assertEqual(context.exception.invariant, "unknown-key")
        self.assertIn("widht", str(context.exception))

    def test_nested_types(self):
        """Test J, f, regulator and plots values of the wrong type."""
        for key, value in (
            ("J", 42),
            ("J", [[1, 0, 0]]),
            ("f", "bump"),
            ("regulator", {"kappa": "abc"}),
            ("regulator", [1.0]),
            ("plots", "no"),
        ):
            with self.subTest(key=key, value=value):
                with self.assertRaises(ConfigError) as context:
                    ExperimentConfig.from_dict({key: value})
                self.assertEqual(context.exception.invariant, "type")

    def test_nested_values_coerced(self):
        """Test J pairs and regulator values are normalised."""
        config = ExperimentConfig.from_dict(
            {
                "J": [(1, 0), (-1, 0), (0, 1), (0, -1)],
                "regulator": {"kappa": 2, "M": 1},
            }
        )
        self.assertEqual(config.J, [[1, 0], [-1, 0], [0, 1], [0, -1]])
        self.assertEqual(config.regulator, {"kappa": 2.0, "M": 1})
        self.assertIsInstance(config.regulator["kappa"], float)
        self.assertEqual(config.validate(), [])

    def test_validate_nested(self):
        """Test validation reports bad J, f and regulator values."""
        config = ExperimentConfig.from_dict(
            {
                "J": "hex",
                "f": {"kind": "sinc", "width": -1.0, "direction": 3},
                "regulator": {"zeta": 1.0},
            }
        )
        errors = config.validate()
        self.assertTrue(any(e.startswith("J is invalid") for e in errors))
        self.assertIn("f width must be positive", errors)
        self.assertIn("f direction must be 1 or 2", errors)
        self.assertTrue(any(e.startswith("f kind") for e in errors))
        self.assertTrue(any("zeta" in e for e in errors))

    def test_validate_asymmetric_J_and_regulator_range(self):
        """Test J must be symmetric and regulator overrides stay in range."""
        config = ExperimentConfig.from_dict(
            {"J": [[1, 0], [0, 1]], "regulator": {"c2": 2.0}}
        )
        errors = config.validate()
        self.assertTrue(any(e.startswith("J is invalid") for e in errors))
        self.assertIn("regulator parameter c2 must be below 1", errors)

    def test_from_file_with_overrides(self):
        """Test flags take precedence over the file."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text(json.dumps({"experiment": "schedule", "N": 6, "seed": 4}))
            config = ExperimentConfig.from_file(path, {"seed": 9})
        self.assertEqual(config.experiment, Experiment.SCHEDULE)
        self.assertEqual(config.N, 6)
        self.assertEqual(config.seed, 9)

    def test_from_file_missing(self):
        """Test a missing config file raises ConfigError."""
        with self.assertRaises(ConfigError):
            ExperimentConfig.from_file("/nonexistent/config.json", {})

    def test_from_file_not_an_object(self):
        """Test a JSON list is rejected."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "config.json"
            path.write_text("[1, 2]")
            with self.assertRaises(ConfigError):
                ExperimentConfig.from_file(path, {})

    def test_validate_success(self):
        """Test every experiment's defaults validate."""
        for experiment in Experiment:
            config = ExperimentConfig.from_dict({"experiment": experiment.value})
            self.assertEqual(config.validate(), [], experiment)

    def test_validate_errors(self):
        """Test validation reports bad ranges."""
        config = ExperimentConfig(
            L=1, beta=0.0, gamma=0.5, eps=[1.5], sweeps=0, adjacency="l2"
        )
        errors = config.validate()
        self.assertTrue(any(e.startswith("L ") for e in errors))
        self.assertTrue(any("beta" in e for e in errors))
        self.assertTrue(any("gamma" in e for e in errors))
        self.assertTrue(any("eps" in e for e in errors))
        self.assertTrue(any("sweeps" in e for e in errors))
        self.assertTrue(any("adjacency" in e for e in errors))

    def test_resolved_is_json_ready(self):
        """Test the resolved config serializes and names the experiment."""
        resolved = ExperimentConfig.from_dict({"experiment": "zn-ratio"}).resolved()
        self.assertEqual(resolved["experiment"], "zn-ratio")
        json.dumps(resolved)


class TestRegulatorParams(unittest.TestCase):
    """Tests for RegulatorParams."""

    def test_default(self):
        """Test the defaults derived from L."""
        params = RegulatorParams.default(4)
        self.assertAlmostEqual(params.kappa, 1 / math.log(4))
        self.assertAlmostEqual(params.c2, 1 / 30)
        self.assertAlmostEqual(params.c4, 60.0)
        self.assertEqual(params.validate(), [])

    def test_with_overrides(self):
        """Test overrides replace values."""
        params = RegulatorParams.default(2).with_overrides({"c1": 2.0})
        self.assertEqual(params.c1, 2.0)

    def test_with_overrides_unknown(self):
        """Test unknown regulator keys raise."""
        with self.assertRaises(ConfigError):
            RegulatorParams.default(2).with_overrides({"zeta": 1.0})

    def test_with_overrides_out_of_range(self):
        """Test c2 must stay below 1."""
        with self.assertRaises(ConfigError) as context:
            RegulatorParams.default(2).with_overrides({"c2": 1.5})
        self.assertEqual(context.exception.invariant, "regulator-params")


class TestEnvHelpers(unittest.TestCase):
    """Tests for environment helper functions."""

    @patch.dict(os.environ, {"TEST_INT": "42"}, clear=True)
    def test_get_int_env(self):
        """Test _get_int_env with valid value."""
        self.assertEqual(_get_int_env("TEST_INT", 0), 42)

    @patch.dict(os.environ, {}, clear=True)
    def test_get_int_env_default(self):
        """Test _get_int_env returns default."""
        self.assertEqual(_get_int_env("MISSING", 10), 10)

    @patch.dict(os.environ, {"TEST_INT": "not_an_int"}, clear=True)
    def test_get_int_env_invalid(self):
        """Test _get_int_env raises on invalid value."""
        with self.assertRaises(ValueError):
            _get_int_env("TEST_INT", 0)

    @patch.dict(os.environ, {"TEST_FLOAT": "3.14"}, clear=True)
    def test_get_float_env(self):
        """Test _get_float_env with valid value."""
        self.assertAlmostEqual(_get_float_env("TEST_FLOAT", 0.0), 3.14)

    @patch.dict(os.environ, {"TEST_FLOAT": "pi"}, clear=True)
    def test_get_float_env_invalid(self):
        """Test _get_float_env raises on invalid value."""
        with self.assertRaises(ValueError):
            _get_float_env("TEST_FLOAT", 0.0)

    @patch.dict(os.environ, {"TEST_LEVEL": "debug"}, clear=True)
    def test_get_log_level_env_lowercase(self):
        """Test _get_log_level_env handles lowercase."""
        level = _get_log_level_env("TEST_LEVEL", LogLevel.INFO)
        self.assertEqual(level, LogLevel.DEBUG)

    @patch.dict(os.environ, {"TEST_LEVEL": "INVALID"}, clear=True)
    def test_get_log_level_env_invalid(self):
        """Test _get_log_level_env raises on invalid value."""
        with self.assertRaises(ValueError):
            _get_log_level_env("TEST_LEVEL", LogLevel.INFO)


class TestConfigSingleton(unittest.TestCase):
    """Tests for config singleton behavior."""

    def setUp(self):
        """Reset config before each test."""
        reset_config()

    def tearDown(self):
        """Reset config after each test."""
        reset_config()

    @patch.dict(os.environ, {}, clear=True)
    def test_get_config_returns_same_instance(self):
        """Test get_config returns the same instance."""
        self.assertIs(get_config(), get_config())

    @patch.dict(os.environ, {}, clear=True)
    def test_reset_config_clears_singleton(self):
        """Test reset_config clears the singleton."""
        config1 = get_config()
        reset_config()
        self.assertIsNot(config1, get_config())
