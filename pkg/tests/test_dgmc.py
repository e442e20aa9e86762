"""Tests for the dgmc module."""

import math
import unittest
from unittest.mock import patch

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from multigauss.dgmc import (
    DEFAULT_P,
    P_RANGE,
    Chain,
    ChainDiagnostics,
    Gauge,
    SamplerMode,
    ScalingRow,
    ZnRow,
    batch_means,
    check_ginibre,
    check_mixing,
    check_monotonicity,
    check_zero_tilt,
    colour_classes,
    energy,
    estimate_log_mgf,
    exact_enumerate,
    gaussian_control_sample,
    mcmc_sample,
    scaling_limit_experiment,
    sign_test_decreasing,
    transition_probability,
    tune_jump_parameter,
    zn_ratio_experiment,
)
from multigauss.errors import BudgetExceededError, SamplerError
from multigauss.extfield import SmoothTestFunction, dipole
from multigauss.lattice import StepDistribution, TorusLattice
from multigauss.spectral import dense_laplacian_J, inverse_laplacian_J, quadratic_form

NN = StepDistribution.nearest_neighbour()
SMALL = TorusLattice(3, 1)


class TestGauge(unittest.TestCase):
    """Tests for Gauge."""

    def test_spacing(self):
        """Test the spin spacing per gauge."""
        self.assertAlmostEqual(Gauge.PINNED.spacing(4.0), 2 * math.pi)
        self.assertAlmostEqual(Gauge.MASS.spacing(4.0), math.pi)
        self.assertEqual(Gauge.PINNED.energy_beta(4.0), 4.0)
        self.assertEqual(Gauge.MASS.energy_beta(4.0), 1.0)


class TestEnergy(unittest.TestCase):
    """Tests for energy and the Metropolis kernel."""

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2**32 - 1))
    def test_matches_quadratic_form(self, seed):
        """Test the edge sum equals (2β)^-1 (σ, (-Δ_J + m²) σ)."""
        lattice = TorusLattice(2, 2)
        J = StepDistribution.linf_ball()
        sigma = np.random.default_rng(seed).normal(size=lattice.shape)
        A = -dense_laplacian_J(J, lattice) + 0.3 * np.eye(lattice.n_sites)
        expected = float(sigma.ravel() @ A @ sigma.ravel()) / (2 * 1.5)
        self.assertAlmostEqual(energy(J, 1.5, sigma, 0.3), expected, delta=1e-10)

    def test_batched(self):
        """Test leading axes are batch axes."""
        sigma = np.random.default_rng(0).normal(size=(3, 4, 4))
        batched = energy(NN, 2.0, sigma)
        self.assertEqual(batched.shape, (3,))
        self.assertAlmostEqual(float(batched[1]), energy(NN, 2.0, sigma[1]))

    def test_detailed_balance(self):
        """Test P(σ -> σ') / P(σ' -> σ) = e^{-(H(σ') - H(σ))}."""
        rng = np.random.default_rng(5)
        spacing = 2 * math.pi
        for beta in (1.0, 4.0):
            sigma = spacing * rng.integers(-1, 2, size=(4, 4)).astype(float)
            for site, step in (((1, 2), 1), ((3, 0), -2), ((2, 2), 3)):
                moved = sigma.copy()
                moved[site] += step * spacing
                forward = transition_probability(NN, beta, sigma, site, step)
                backward = transition_probability(NN, beta, moved, site, -step)
                dE = energy(NN, beta, moved) - energy(NN, beta, sigma)
                np.testing.assert_allclose(
                    forward / backward, math.exp(-dE), rtol=1e-11
                )

    def test_zero_step(self):
        """Test a zero move has no transition probability."""
        with self.assertRaises(SamplerError):
            transition_probability(NN, 1.0, np.zeros((4, 4)), (0, 0), 0)

    def test_colour_classes(self):
        """Test the classes partition the torus into non-interacting sites."""
        classes = colour_classes(NN, 4)
        self.assertEqual(len(classes), 4)
        cover = sum(c.astype(int) for c in classes)
        np.testing.assert_array_equal(cover, np.ones((4, 4)))
        self.assertEqual(len(colour_classes(NN, 3)), 9)


class TestBatchMeans(unittest.TestCase):
    """Tests for batch_means."""

    def test_constant(self):
        """Test a constant series has no error."""
        mean, se, tau = batch_means(np.full((100, 4), 2.0))
        self.assertEqual((mean, se, tau), (2.0, 0.0, 0.5))

    def test_single_chain(self):
        """Test one chain is cut into batches."""
        series = np.random.default_rng(0).normal(size=1600)
        mean, se, tau = batch_means(series)
        self.assertAlmostEqual(mean, float(series.mean()))
        self.assertGreater(se, 0.0)
        self.assertGreaterEqual(tau, 0.5)

    def test_empty(self):
        """Test empty input is rejected."""
        with self.assertRaises(SamplerError):
            batch_means(np.empty((0, 3)))


class TestMCMC(unittest.TestCase):
    """Tests for mcmc_sample."""

    def test_pinned_origin(self):
        """Test σ_0 stays 0 in the pinned gauge."""
        chain = mcmc_sample(NN, 8.0, SMALL, 60, np.random.default_rng(1), chains=4)
        np.testing.assert_array_equal(chain.heights[:, 0, 0], 0)
        self.assertEqual(chain.heights.shape, (4, 3, 3))
        self.assertEqual(chain.observables["sq"].shape, (54, 4))
        self.assertGreater(chain.diagnostics.acceptance, 0.0)

    def test_reproducible_across_threads(self):
        """Test results depend on the seed and not on the worker count."""
        runs = [
            mcmc_sample(
                NN, 4.0, SMALL, 40, np.random.default_rng(9), chains=20, threads=threads
            )
            for threads in (1, 3)
        ]
        np.testing.assert_array_equal(runs[0].heights, runs[1].heights)
        np.testing.assert_array_equal(
            runs[0].observables["sq"], runs[1].observables["sq"]
        )

    def test_low_temperature_freezes(self):
        """Test β = 0.5 keeps every spin at 0 and gives zero tilt."""
        chain = mcmc_sample(NN, 0.5, SMALL, 50, np.random.default_rng(2), chains=4)
        np.testing.assert_array_equal(chain.heights, 0)
        self.assertEqual(chain.estimate("sq"), (0.0, 0.0))
        report = check_zero_tilt(chain)
        self.assertEqual(report.zero, (True, True))
        self.assertTrue(report.symmetric)

    def test_mass_gauge(self):
        """Test the mass gauge uses the spacing 2π/√β and needs m² > 0."""
        chain = mcmc_sample(
            NN,
            4.0,
            SMALL,
            20,
            np.random.default_rng(3),
            chains=2,
            m2=0.5,
            gauge=Gauge.MASS,
        )
        self.assertAlmostEqual(chain.spacing, math.pi)
        with self.assertRaises(SamplerError) as context:
            mcmc_sample(NN, 4.0, SMALL, 20, np.random.default_rng(3), gauge=Gauge.MASS)
        self.assertEqual(context.exception.invariant, "normalisable")

    def test_invalid_runs(self):
        """Test parameter validation."""
        rng = np.random.default_rng(0)
        with self.assertRaises(SamplerError):
            mcmc_sample(NN, 0.0, SMALL, 20, rng)
        with self.assertRaises(SamplerError):
            mcmc_sample(NN, 1.0, SMALL, 20, rng, p=1.0)
        with self.assertRaises(SamplerError):
            mcmc_sample(NN, 1.0, SMALL, 5, rng, burn_in=5)
        start = np.ones((3, 3), dtype=np.int64)
        with self.assertRaises(SamplerError) as context:
            mcmc_sample(NN, 1.0, SMALL, 20, rng, start=start)
        self.assertEqual(context.exception.invariant, "gauge-pinned")

    def test_tuning_moves_jump_parameter(self):
        """Test burn-in tuning shortens jumps when acceptance is low."""
        runs = {
            tune: mcmc_sample(
                NN,
                6.0,
                SMALL,
                40,
                np.random.default_rng(12),
                chains=16,
                burn_in=20,
                tune=tune,
            )
            for tune in (False, True)
        }
        self.assertEqual(runs[False].diagnostics.jump_parameters, (DEFAULT_P,) * 2)
        for p in runs[True].diagnostics.jump_parameters:
            self.assertAlmostEqual(p, P_RANGE[1])
        self.assertGreater(
            runs[True].diagnostics.acceptance, runs[False].diagnostics.acceptance
        )

    def test_odd_moments_vanish(self):
        """Test ⟨(f, σ)⟩ and ⟨(f, σ)³⟩ are zero within three standard errors."""
        f = dipole(SMALL)
        chain = mcmc_sample(
            NN, 8.0, SMALL, 1000, np.random.default_rng(13), chains=32, f=f
        )
        x = chain.observables["fsigma"]
        self.assertGreater(float(np.abs(x).max()), 0.0)
        for power in (1, 3):
            with self.subTest(power=power):
                mean, se, _ = batch_means(x**power)
                self.assertLessEqual(abs(mean), 3 * se + 1e-12)

    @pytest.mark.slow
    def test_biased_start_relaxes(self):
        """Test a tilted start loses its tilt and burn-in removes it."""
        lattice = TorusLattice(2, 3)
        start = np.zeros(lattice.shape, dtype=np.int64)
        start[4:, :] = 1
        relaxing = mcmc_sample(
            NN,
            16.0,
            lattice,
            600,
            np.random.default_rng(14),
            chains=32,
            burn_in=0,
            start=start,
        )
        tilt = relaxing.observables["tilt_1"]
        first = float(tilt[0].mean())
        late = float(tilt[-200:].mean())
        self.assertGreater(first, 0.75)
        self.assertLess(abs(late), first / 3)
        settled = mcmc_sample(
            NN,
            16.0,
            lattice,
            600,
            np.random.default_rng(15),
            chains=32,
            burn_in=300,
            start=start,
        )
        self.assertTrue(check_zero_tilt(settled).zero[0])

    @pytest.mark.slow
    def test_matches_exact_enumeration(self):
        """Test ⟨(f, σ)²⟩ and ⟨e^{(f, σ)}⟩ against exact enumeration."""
        f = dipole(SMALL, 0.25)
        for beta in (1.0, 2.0, 4.0):
            with self.subTest(beta=beta):
                exact = exact_enumerate(NN, beta, SMALL, 3 if beta > 2 else 2, f)
                chain = mcmc_sample(
                    NN, beta, SMALL, 8000, np.random.default_rng(11), chains=32, f=f
                )
                x = chain.observables["fsigma"]
                for sampled, expected in (
                    (x * x, exact.second_moment),
                    (np.exp(x), exact.mgf),
                ):
                    mean, se, _ = batch_means(sampled)
                    self.assertLessEqual(abs(mean - expected), 3 * se + 1e-6)


def _chain(acceptance, tau, burn_in=20):
    diagnostics = ChainDiagnostics(
        200, burn_in, 4, acceptance, {"fsigma": 0.0}, {"fsigma": 0.1}, {"fsigma": tau}
    )
    heights = np.zeros((4, 3, 3), dtype=np.int64)
    return Chain(heights, 2 * math.pi, Gauge.PINNED, {}, diagnostics)


class TestMixing(unittest.TestCase):
    """Tests for check_mixing and the jump-parameter tuning."""

    def test_healthy_chain_passes(self):
        """Test moving chains with short memory are accepted."""
        check_mixing(_chain(0.35, 3.0), "fsigma")
        check_mixing(_chain(0.01, 20.0), "fsigma")

    def test_frozen_chain(self):
        """Test chains that never move are refused."""
        with self.assertRaises(SamplerError) as context:
            check_mixing(_chain(0.0, 0.5), "fsigma")
        self.assertEqual(context.exception.invariant, "ergodic")

    def test_burn_in_shorter_than_tau(self):
        """Test an autocorrelation time beyond the burn-in is refused."""
        with self.assertRaises(SamplerError) as context:
            check_mixing(_chain(0.4, 25.0), "fsigma")
        self.assertEqual(context.exception.invariant, "ergodic")
        with self.assertRaises(SamplerError):
            check_mixing(_chain(0.4, 1.5, burn_in=0), "fsigma")

    def test_tune_jump_parameter(self):
        """Test p moves toward the band and stays inside its range."""
        self.assertAlmostEqual(tune_jump_parameter(0.6, 0.1), 0.65)
        self.assertAlmostEqual(tune_jump_parameter(0.6, 0.8), 0.55)
        self.assertEqual(tune_jump_parameter(0.6, 0.45), 0.6)
        self.assertEqual(tune_jump_parameter(P_RANGE[1], 0.0), P_RANGE[1])
        self.assertEqual(tune_jump_parameter(P_RANGE[0], 1.0), P_RANGE[0])

    def test_frozen_sampler_refused_by_experiment(self):
        """Test the scaling sweep refuses chains that never move."""
        with self.assertRaises(SamplerError) as context:
            scaling_limit_experiment(
                NN,
                0.5,
                TorusLattice(2, 5),
                SmoothTestFunction(width=0.25),
                [0.5],
                sweeps=20,
                chains=2,
                rng=np.random.default_rng(16),
            )
        self.assertEqual(context.exception.invariant, "ergodic")


class TestExactEnumeration(unittest.TestCase):
    """Tests for exact_enumerate."""

    def test_no_field(self):
        """Test f = 0 gives unit moment generating function."""
        result = exact_enumerate(NN, 2.0, SMALL, 1)
        self.assertAlmostEqual(result.mgf, 1.0, places=14)
        self.assertAlmostEqual(result.characteristic, 1.0, places=14)
        self.assertEqual(result.second_moment, 0.0)
        self.assertEqual(result.states, 3**8)

    def test_parity(self):
        """Test ⟨(f, σ)⟩ vanishes by σ -> -σ symmetry."""
        result = exact_enumerate(NN, 4.0, SMALL, 1, dipole(SMALL))
        self.assertAlmostEqual(result.mean, 0.0, delta=1e-12)

    def test_truncation_converges(self):
        """Test K = 1 and K = 2 agree at β = 1 and only K = 1 is flagged."""
        f = dipole(SMALL, 0.5)
        with self.assertLogs("multigauss.dgmc", level="WARNING"):
            coarse = exact_enumerate(NN, 1.0, SMALL, 1, f)
        fine = exact_enumerate(NN, 1.0, SMALL, 2, f)
        self.assertTrue(coarse.truncated)
        self.assertFalse(fine.truncated)
        self.assertAlmostEqual(coarse.characteristic, fine.characteristic, delta=1e-12)
        self.assertAlmostEqual(coarse.second_moment, fine.second_moment, delta=1e-10)

    def test_budget(self):
        """Test large state spaces are refused."""
        with self.assertRaises(BudgetExceededError):
            exact_enumerate(NN, 1.0, TorusLattice(2, 3), 1)
        with self.assertRaises(SamplerError):
            exact_enumerate(NN, 1.0, SMALL, 0)


class TestGinibre(unittest.TestCase):
    """Tests for the correlation inequalities."""

    def test_oracle(self):
        """Test both moment bounds hold exactly on a 3x3 torus."""
        f = dipole(SMALL)
        for beta in (1.0, 2.0, 4.0):
            report = check_ginibre(NN, beta, SMALL, f, K=3 if beta > 2 else 2)
            self.assertEqual(report.mode, "oracle")
            self.assertTrue(report.holds)
            self.assertGreaterEqual(min(report.slack), 0.0)
            green = quadratic_form(inverse_laplacian_J(NN, SMALL), f)
            self.assertAlmostEqual(report.green, green)

    @pytest.mark.slow
    def test_monotonicity(self):
        """Test S_1 <= S_2 for the nested tori of side 2 and 4."""
        report = check_monotonicity(NN, 2.0, charge=0.3, K=1)
        self.assertEqual((report.side_small, report.side_large), (2, 4))
        self.assertTrue(report.holds)

    def test_unknown_mode(self):
        """Test only oracle and mcmc are accepted."""
        with self.assertRaises(SamplerError) as context:
            check_ginibre(NN, 1.0, SMALL, dipole(SMALL), mode="exact")
        self.assertEqual(context.exception.invariant, "ginibre-mode")


class TestEstimators(unittest.TestCase):
    """Tests for the Gaussian control and the log-MGF estimator."""

    def test_gaussian_control_variance(self):
        """Test Var (f, X) = β (f, (-Δ_J)^-1 f)."""
        lattice = TorusLattice(2, 3)
        f = dipole(lattice)
        rng = np.random.default_rng(4)
        fields = gaussian_control_sample(NN, 2.0, lattice, 4000, rng)
        self.assertEqual(fields.shape, (4000, 8, 8))
        np.testing.assert_allclose(fields.sum(axis=(1, 2)), 0.0, atol=1e-10)
        x = np.tensordot(fields, f, axes=((1, 2), (0, 1)))
        expected = 2.0 * quadratic_form(inverse_laplacian_J(NN, lattice), f)
        self.assertAlmostEqual(float(np.var(x)) / expected, 1.0, delta=0.1)

    def test_log_mgf_of_zeros(self):
        """Test a constant zero sample has zero log-MGF."""
        est = estimate_log_mgf(np.zeros(100))
        self.assertEqual(est.amplitude, 1.0)
        self.assertEqual(est.log_mgf, 0.0)
        self.assertEqual(est.ess_fraction, 1.0)

    def test_log_mgf_of_normal(self):
        """Test log E[e^{aX}] = a²/2 for standard normal X."""
        x = np.random.default_rng(6).normal(size=20000)
        est = estimate_log_mgf(x, amplitude=0.5)
        self.assertLessEqual(abs(est.log_mgf - 0.125), 3 * est.se)

    def test_log_mgf_error_shrinks_with_budget(self):
        """Test doubling the recorded sweeps divides the error by about √2."""
        rng = np.random.default_rng(7)
        short = estimate_log_mgf(rng.normal(size=(10, 2000)), amplitude=0.5)
        long = estimate_log_mgf(rng.normal(size=(20, 2000)), amplitude=0.5)
        self.assertGreaterEqual(short.se / long.se, 1.3)
        self.assertLessEqual(short.se / long.se, 1.6)


    def test_degenerate_weights(self):
        """Test a single dominating sample trips the gate."""
        x = np.zeros(100)
        x[0] = 100.0
        with self.assertRaises(SamplerError) as context:
            estimate_log_mgf(x, amplitude=1.0, min_ess_fraction=0.5)
        self.assertEqual(context.exception.invariant, "ess")


class TestScalingExperiments(unittest.TestCase):
    """Tests for the ε sweeps."""

    def setUp(self):
        """A Gaussian-derivative test function on a 32x32 torus."""
        self.lattice = TorusLattice(2, 5)
        self.f = SmoothTestFunction(width=0.25)

    def test_gaussian_control_reproduces_lattice_target(self):
        """Test the Gaussian sampler agrees with (β/2)(f_ε, (-Δ_J)^-1 f_ε)."""
        report = scaling_limit_experiment(
            NN,
            2.0,
            self.lattice,
            self.f,
            [0.25, 0.5],
            mode=SamplerMode.GAUSSIAN,
            sweeps=200,
            chains=20,
            rng=np.random.default_rng(8),
        )
        self.assertIs(report.mode, SamplerMode.GAUSSIAN)
        self.assertEqual([row.eps for row in report.rows], [0.5, 0.25])
        for row in report.rows:
            gap = abs(row.estimate - row.lattice_target)
            self.assertLessEqual(gap, 3 * row.se)
            self.assertLessEqual(row.j_f, self.lattice.N)
            self.assertGreater(row.target, 0.0)

    def test_mesoscopic_window(self):
        """Test ε L^N must be at least 8."""
        with self.assertRaises(SamplerError) as context:
            scaling_limit_experiment(NN, 2.0, TorusLattice(2, 4), self.f, [0.25])
        self.assertEqual(context.exception.invariant, "mesoscopic-window")

    @patch("multigauss.dgmc.check_mixing")
    def test_zn_ratio_rows(self, mock_mixing):
        """Test the remainder subtracts the Gaussian part."""
        report = zn_ratio_experiment(
            NN,
            4.0,
            self.lattice,
            self.f,
            [0.25, 0.5],
            sweeps=20,
            chains=8,
            rng=np.random.default_rng(10),
            min_ess_fraction=0.0,
        )
        self.assertEqual(mock_mixing.call_count, 2)
        self.assertEqual(len(report.rows), 2)
        for row in report.rows:
            self.assertAlmostEqual(row.value, row.log_mgf - row.gaussian_part)
            self.assertGreaterEqual(row.gaussian_part, 0.0)
            self.assertEqual(row.j_f, 5)
        self.assertEqual(report.pairs, 1)
        self.assertTrue(any(math.isclose(report.p_value, p) for p in (0.5, 1.0)))
        self.assertFalse(report.decreasing)


def _zn_rows(values, j_f=3):
    eps = [0.5, 0.4, 0.3, 0.25, 0.2, 0.15, 0.125]
    return [ZnRow(e, j_f, 1.0, 1.0 + v, 1.0, 0.01) for e, v in zip(eps, values)]


class TestSignTest(unittest.TestCase):
    """Tests for sign_test_decreasing."""

    def test_steady_decay_is_significant(self):
        """Test six drops out of six reject "no decay" with p = 1/64."""
        report = sign_test_decreasing(_zn_rows([0.7, -0.6, 0.5, 0.4, -0.3, 0.2, 0.1]))
        self.assertEqual((report.decreases, report.pairs), (6, 6))
        self.assertAlmostEqual(report.p_value, 1 / 64)
        self.assertTrue(report.decreasing)

    def test_growth_is_not_decay(self):
        """Test growing and flat remainders are not reported as decreasing."""
        for values in ([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7], [0.3] * 7):
            with self.subTest(values=values):
                report = sign_test_decreasing(_zn_rows(values))
                self.assertEqual(report.decreases, 0)
                self.assertAlmostEqual(report.p_value, 1.0)
                self.assertFalse(report.decreasing)

    def test_mixed_signs_are_not_significant(self):
        """Test four drops out of six stay above the 5% level."""
        report = sign_test_decreasing(_zn_rows([0.7, 0.6, 0.65, 0.5, 0.55, 0.4, 0.3]))
        self.assertEqual(report.decreases, 4)
        self.assertGreater(report.p_value, 0.05)
        self.assertFalse(report.decreasing)

    def test_orders_by_scale_then_eps(self):
        """Test rows are compared along increasing j_f and decreasing ε."""
        rows = _zn_rows([0.1, 0.2, 0.3], j_f=4) + _zn_rows([0.7, 0.6, 0.5], j_f=2)
        report = sign_test_decreasing(rows)
        self.assertEqual(report.rows, tuple(rows))
        self.assertEqual((report.decreases, report.pairs), (3, 5))

    def test_single_row(self):
        """Test one row gives no pairs and no verdict."""
        report = sign_test_decreasing(_zn_rows([0.5]))
        self.assertEqual(report.pairs, 0)
        self.assertTrue(math.isnan(report.p_value))
        self.assertFalse(report.decreasing)


class TestScalingRow(unittest.TestCase):
    """Tests for the error budget of a scaling row."""

    def test_errors_add_in_quadrature(self):
        """Test the ratio error combines statistics and discretisation."""
        row = ScalingRow(0.25, 4, 1.0, 2.1, 0.06, 2.0, 1.92, 0.9)
        self.assertAlmostEqual(row.ratio, 1.05)
        self.assertAlmostEqual(row.statistical_error, 0.03)
        self.assertAlmostEqual(row.discretisation_error, 0.04)
        self.assertAlmostEqual(row.ratio_error, 0.05)

    def test_zero_target(self):
        """Test a vanishing prediction gives nan errors."""
        row = ScalingRow(0.25, 4, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0)
        self.assertTrue(math.isnan(row.ratio))
        self.assertTrue(math.isnan(row.ratio_error))
