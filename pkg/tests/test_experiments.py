"""Tests for the experiments module."""

import math
import unittest
from unittest.mock import patch

import pytest

from multigauss.config import Experiment, ExperimentConfig
from multigauss.dgmc import (
    ScalingLimitReport,
    ScalingRow,
    ZnRow,
    sign_test_decreasing,
)
from multigauss.experiments import RUNNERS, run_experiment
from multigauss.spectral import QuadratureResult


def _config(experiment, **overrides):
    return ExperimentConfig.from_dict({"experiment": experiment.value, **overrides})


class TestRunners(unittest.TestCase):
    """Tests for the runner table."""

    def test_every_experiment_has_a_runner(self):
        """Test the dispatch table covers every experiment id."""
        self.assertEqual(set(RUNNERS), set(Experiment))


class TestDecompose(unittest.TestCase):
    """Tests for the decompose experiment."""

    def test_residual_and_rows(self):
        """Test one row per scale and a telescoping residual below 1e-10."""
        result = run_experiment(_config(Experiment.DECOMPOSE, L=2, N=3))
        self.assertEqual(len(result.rows), 3)
        self.assertEqual(len(result.columns), len(result.rows[0]))
        self.assertLessEqual(result.max_residual, 1e-10)
        self.assertGreaterEqual(result.summary["min_eigenvalue"], -1e-12)
        self.assertFalse(result.summary["divergent"])
        self.assertNotIn("subdecomposition_residual", result.summary)
        self.assertIsNotNone(result.plot)

    def test_fractional_scales(self):
        """Test the fractional pieces rebuild every Γ_j."""
        result = run_experiment(_config(Experiment.DECOMPOSE, L=4, N=2, M=2))
        self.assertLessEqual(result.summary["subdecomposition_residual"], 1e-12)

    def test_massless(self):
        """Test the massless run reports no t_N."""
        result = run_experiment(_config(Experiment.DECOMPOSE, L=2, N=3, m2=0.0))
        self.assertTrue(result.summary["divergent"])
        self.assertIsNone(result.summary["t_N"])
        self.assertLessEqual(result.max_residual, 1e-10)


class TestSchedule(unittest.TestCase):
    """Tests for the schedule experiment."""

    def test_completeness(self):
        """Test the shifts rebuild the field for every ε of the sweep."""
        result = run_experiment(
            _config(Experiment.SCHEDULE, L=2, N=8, eps=[0.25, 0.125], plots=False)
        )
        self.assertLessEqual(result.summary["completeness"], 1e-10)
        self.assertEqual(set(result.summary["per_eps"]), {"0.25", "0.125"})
        self.assertEqual(result.trials, 2)
        for row in result.rows:
            self.assertIn(row[0], (0.25, 0.125))


class TestCtildeLimit(unittest.TestCase):
    """Tests for the ctilde-limit experiment."""

    def test_summary(self):
        """Test the prediction is 4 (f, (-Δ)^-1 f) for the nearest-neighbour walk."""
        cfg = _config(Experiment.CTILDE_LIMIT, N=8, eps=[0.25, 0.125])
        result = run_experiment(cfg)
        self.assertAlmostEqual(result.summary["target"], 2 * math.pi, places=6)
        self.assertEqual([row[0] for row in result.rows], [0.25, 0.125])
        self.assertTrue(math.isfinite(result.summary["limit"]))


class TestCampaigns(unittest.TestCase):
    """Tests for the randomized identity campaigns."""

    def test_reblocking(self):
        """Test the reblocking identity and its u = 0 control."""
        cfg = _config(Experiment.REBLOCKING_CHECK, trials=3, samples=3)
        result = run_experiment(cfg)
        self.assertEqual(len(result.rows), 3)
        self.assertLessEqual(result.max_residual, 1e-10)
        self.assertLessEqual(result.summary["max_control_residual"], 1e-12)

    def test_rg_consistency(self):
        """Test E[Z_j(φ' + ζ)] = Z_{j+1}(φ') on a short campaign."""
        result = run_experiment(
            _config(Experiment.RG_CONSISTENCY, trials=2, samples=2, zeta_samples=3)
        )
        self.assertEqual(result.trials, 2)
        self.assertLessEqual(result.max_residual, 1e-9)

    def test_campaigns_are_reproducible(self):
        """Test equal seeds give equal residuals."""
        cfg = _config(Experiment.REBLOCKING_CHECK, trials=2, samples=2, seed=4)
        self.assertEqual(run_experiment(cfg).rows, run_experiment(cfg).rows)

    def test_regulator_falsify(self):
        """Test no instance breaks the regulator properties."""
        result = run_experiment(_config(Experiment.REGULATOR_FALSIFY, trials=20))
        self.assertEqual(result.summary["failures"], 0)
        self.assertEqual(result.summary["psi_violations"], 0)
        self.assertLessEqual(result.summary["max_endpoint_gap"], 1e-10)
        self.assertLessEqual(result.summary["max_factor_residual"], 1e-10)
        self.assertEqual(len(result.rows), 20)


class TestGinibre(unittest.TestCase):
    """Tests for the ginibre experiment."""

    @pytest.mark.slow
    def test_oracle_and_monotonicity(self):
        """Test the exact bounds and the nested-torus comparison hold."""
        result = run_experiment(
            _config(Experiment.GINIBRE, truncation=2, sweeps=200, chains=8)
        )
        oracle = result.rows[0]
        self.assertEqual(oracle[0], "oracle")
        self.assertTrue(oracle[-1])
        self.assertTrue(result.summary["monotonicity"]["holds"])
        self.assertEqual(set(result.summary["slack"]), {"oracle", "mcmc"})


def _scaling_report(mode):
    row = ScalingRow(0.125, 2, 1.0, 2.1, 0.06, 2.0, 1.92, 0.9)
    return ScalingLimitReport(mode, (row,), QuadratureResult(2.0, 1e-12))


class TestSamplerExperiments(unittest.TestCase):
    """Tests for the scaling-limit and zn-ratio outputs."""

    @patch("multigauss.experiments.scaling_limit_experiment")
    def test_scaling_limit_error_columns(self, mock_experiment):
        """Test the combined error reaches the table, the summary and the plot."""
        mock_experiment.side_effect = lambda *a, **kw: _scaling_report(kw["mode"])
        result = run_experiment(_config(Experiment.SCALING_LIMIT))
        self.assertEqual(len(result.rows), 2)
        row = dict(zip(result.columns, result.rows[0]))
        self.assertAlmostEqual(row["statistical_error"], 0.03)
        self.assertAlmostEqual(row["discretisation_error"], 0.04)
        self.assertAlmostEqual(row["ratio_error"], 0.05)
        self.assertAlmostEqual(result.summary["ratio_error"], 0.05)
        self.assertAlmostEqual(result.summary["discretisation_error"], 0.04)
        self.assertEqual(len(result.plot.yerr), 1)
        self.assertAlmostEqual(result.plot.yerr[0], 0.05)

    @patch("multigauss.experiments.zn_ratio_experiment")
    def test_zn_ratio_sign_test_summary(self, mock_experiment):
        """Test the sign-test counts and p-value land in the summary."""
        eps = [0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.125]
        rows = [
            ZnRow(e, 2, 1.0, 1.0 + v, 1.0, 0.01)
            for e, v in zip(eps, [0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1])
        ]
        mock_experiment.return_value = sign_test_decreasing(rows)
        summary = run_experiment(_config(Experiment.ZN_RATIO)).summary
        self.assertEqual((summary["decreases"], summary["pairs"]), (6, 6))
        self.assertAlmostEqual(summary["sign_test_p_value"], 1 / 64)
        self.assertTrue(summary["decreasing"])
