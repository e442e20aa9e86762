"""Tests for the rgstep module."""

import math
import unittest

import numpy as np

from multigauss.activities import (
    ConstantLoc,
    PolymerActivity,
    UCoupling,
    ZeroLoc,
    trig_activity,
    with_origin_part,
)
from multigauss.errors import BudgetExceededError, ExpectationError
from multigauss.lattice import StepDistribution, TorusLattice
from multigauss.polymers import Adjacency, BlockLattice
from multigauss.rgstep import (
    ExpectationFunctional,
    ExpectationKind,
    RGState,
    check_reblocking,
    check_rg_consistency,
    e_next,
    eval_Z,
    k_next_bulk,
    k_next_psi,
    next_state,
    polymer_bracket,
    polymer_power,
    s_reblock,
)
from multigauss.spectral import covariance_C, dense_matrix

NN = StepDistribution.nearest_neighbour()
LATTICE = TorusLattice(2, 2)
BETA = 2.0


def _geometry(adjacency=Adjacency.LINF):
    return BlockLattice.at_scale(LATTICE, 1, adjacency)


def _state(seed, geometry=None, perturbed=True):
    geometry = geometry or _geometry()
    rng = np.random.default_rng(seed)
    U = UCoupling(
        s=float(rng.normal(0.0, 0.1)),
        z=(float(rng.normal(0.0, 0.1)),),
        beta=BETA,
        block_side=geometry.block_side,
    )
    K = trig_activity(geometry, BETA, 0.1, seed, name="K")
    if not perturbed:
        return RGState(geometry, 0.0, 0.0, U, K, K)
    extra = trig_activity(geometry, BETA, 0.05, seed + 1, origin_only=True)
    psi = trig_activity(geometry, BETA, 0.05, seed + 2, origin_only=True)
    return RGState(geometry, 0.0, 0.0, U, K, with_origin_part(K, extra), psi)


def _fields(seed, n, scale=0.3):
    return list(np.random.default_rng(seed).normal(0.0, scale, size=(n, 4, 4)))


def _U_next(seed):
    rng = np.random.default_rng(seed)
    return UCoupling(
        s=float(rng.normal(0.0, 0.1)),
        z=(float(rng.normal(0.0, 0.1)),),
        beta=BETA,
        block_side=4,
    )


class TestExpectationFunctional(unittest.TestCase):
    """Tests for ExpectationFunctional."""

    def test_empirical(self):
        """Test uniform weights over fixed samples."""
        samples = np.arange(32, dtype=float).reshape(2, 4, 4)
        E = ExpectationFunctional.empirical(samples)
        self.assertIs(E.kind, ExpectationKind.EMPIRICAL)
        self.assertTrue(E.is_fixed)
        self.assertAlmostEqual(E.expect(lambda z: 1.0), 1.0)
        self.assertAlmostEqual(E.expect(lambda z: float(z[0, 0])), 8.0)

    def test_gaussian_mc_is_not_fixed(self):
        """Test the Monte Carlo kind redraws and is refused by exact checks."""
        C = covariance_C(NN, LATTICE, 1.0, 0.0)
        E = ExpectationFunctional.gaussian_mc(C, 4, np.random.default_rng(0))
        self.assertFalse(E.is_fixed)
        first, _ = E.sample_set()
        second, weights = E.sample_set()
        self.assertEqual(first.shape, (4, 4, 4))
        self.assertFalse(np.array_equal(first, second))
        np.testing.assert_allclose(weights, 0.25)
        with self.assertRaises(ExpectationError) as context:
            E.require_fixed("test")
        self.assertEqual(context.exception.invariant, "fixed-expectation")

    def test_gauss_hermite_moments(self):
        """Test the tensor rule reproduces second and fourth moments."""
        lattice = TorusLattice(2, 1)
        C = covariance_C(NN, lattice, 1.0, 0.0)
        E = ExpectationFunctional.gaussian_exact_small(C)
        matrix = dense_matrix(C)
        self.assertEqual(len(E.nodes), 3**4)
        self.assertAlmostEqual(float(E.weights.sum()), 1.0, places=12)
        self.assertAlmostEqual(E.expect(lambda z: float(z[0, 0])), 0.0, places=12)
        self.assertAlmostEqual(
            E.expect(lambda z: float(z[0, 0] * z[1, 0])), matrix[0, 2], places=12
        )
        self.assertAlmostEqual(
            E.expect(lambda z: float(z[0, 0] ** 4)), 3 * matrix[0, 0] ** 2, places=12
        )

    def test_gauss_hermite_budget(self):
        """Test the node count is bounded."""
        C = covariance_C(NN, TorusLattice(2, 1), 1.0, 0.0)
        with self.assertRaises(BudgetExceededError):
            ExpectationFunctional.gaussian_exact_small(C, budget=10)

    def test_rejects_plain_callables(self):
        """Test only expectation functionals are accepted."""
        with self.assertRaises(ExpectationError) as context:
            e_next(_state(1), lambda fn: 0.0)
        self.assertEqual(context.exception.invariant, "linear-expectation")


class TestPolymerGas(unittest.TestCase):
    """Tests for eval_Z, products over polymers and RGState."""

    def test_eval_Z_without_activity(self):
        """Test a vanishing activity leaves only the energy and U terms."""
        geometry = _geometry()
        zero = PolymerActivity(geometry, lambda Y, phi: 0.0)
        U = UCoupling(s=0.0, z=(0.0,), beta=BETA, block_side=2)
        state = RGState(geometry, 0.1, 0.3, U, zero, zero)
        self.assertAlmostEqual(eval_Z(state, LATTICE.zeros()), math.exp(-1.6 + 0.3))

    def test_polymer_products(self):
        """Test products over blocks and over components."""
        geometry = BlockLattice.at_scale(TorusLattice(2, 3), 1, Adjacency.L1)
        X = geometry.polymer([0, 1, 10])
        def size(Y, phi):
            return len(Y) + 1.0

        phi = np.zeros((8, 8))
        self.assertEqual(polymer_power(size, X, phi), 8.0)
        self.assertEqual(polymer_bracket(size, X, phi), 6.0)

    def test_violations(self):
        """Test the off-origin conditions of a campaign state."""
        self.assertEqual(_state(3).violations(LATTICE.zeros()), [])
        geometry = _geometry()
        K = trig_activity(geometry, BETA, 0.1, 5)
        bad = RGState(
            geometry,
            0.0,
            0.0,
            UCoupling(0.0, (0.0,), BETA, 2),
            K,
            K,
            trig_activity(geometry, BETA, 0.1, 6),
        )
        problems = bad.violations(LATTICE.zeros())
        self.assertTrue(problems)
        self.assertTrue(all("Ψ is nonzero" in p for p in problems))

    def test_describe(self):
        """Test the JSON summary of the scalar coordinates."""
        summary = _state(2).describe()
        self.assertEqual(summary["block_side"], 2)
        self.assertTrue(summary["has_psi"])
        self.assertEqual(len(summary["z"]), 1)

    def test_s_reblock_counts_connected_polymers(self):
        """Test 𝕊 of the unit activity counts connected fine polymers."""
        for adjacency, expected in ((Adjacency.LINF, 15), (Adjacency.L1, 13)):
            geometry = _geometry(adjacency)
            one = PolymerActivity(geometry, lambda Y, phi: 1.0)
            reblocked = s_reblock(one)
            self.assertEqual(reblocked.geometry.n_blocks, 1)
            value = reblocked(reblocked.geometry.whole(), LATTICE.zeros())
            self.assertEqual(value, expected)


class TestReblocking(unittest.TestCase):
    """Tests for f_psi through check_reblocking."""

    def test_shift_is_absorbed(self):
        """Test Z_j(φ + u) = Z_j^Ψ(φ) on random states."""
        for trial in range(4):
            state = _state(10 + trial)
            u = np.random.default_rng(trial).normal(0.0, 0.5, size=(4, 4))
            check = check_reblocking(state, u, _fields(100 + trial, 3))
            self.assertEqual(len(check.residuals), 3)
            self.assertLessEqual(check.max_residual, 1e-10)

    def test_zero_shift_control(self):
        """Test u = 0 gives Ψ = 0 up to rounding."""
        check = check_reblocking(_state(7), LATTICE.zeros(), _fields(8, 3))
        self.assertLessEqual(check.max_residual, 1e-12)

    def test_no_fields(self):
        """Test an empty check has zero residual."""
        check = check_reblocking(_state(7), LATTICE.zeros(), [])
        self.assertEqual(check.max_residual, 0.0)


class TestNextScale(unittest.TestCase):
    """Tests for the step to the next scale."""

    def setUp(self):
        """Fixed ζ samples on the 4x4 torus."""
        self.E = ExpectationFunctional.empirical(np.stack(_fields(42, 4, 0.5)))

    def test_consistency(self):
        """Test E[Z_j(φ' + ζ)] = Z_{j+1}(φ') for both localisations."""
        for trial, loc in enumerate((ZeroLoc(), ConstantLoc())):
            state = _state(20 + trial)
            check = check_rg_consistency(
                state, self.E, 0.05, _U_next(trial), loc, _fields(60 + trial, 2)
            )
            self.assertLessEqual(check.max_residual, 1e-9)
            self.assertAlmostEqual(check.e_next, e_next(state, self.E), places=12)

    def test_unperturbed_has_no_one_point_energy(self):
        """Test 𝔢_{j+1} vanishes without Ψ and with K_pert = K_bulk."""
        value = e_next(_state(4, perturbed=False), self.E)
        self.assertAlmostEqual(value, 0.0, places=14)

    def test_bulk_matches_table(self):
        """Test the two evaluations of K_{j+1} agree when Ψ = 0."""
        state = _state(30, perturbed=False)
        for loc in (ZeroLoc(), ConstantLoc()):
            table = k_next_psi(state, self.E, 0.02, _U_next(5), loc)
            bulk = k_next_bulk(state, self.E, 0.02, _U_next(5), loc)
            whole = table.geometry.whole()
            for phi in _fields(70, 2):
                self.assertAlmostEqual(table(whole, phi), bulk(whole, phi), delta=1e-10)

    def test_consistency_needs_fixed_functional(self):
        """Test a redrawing functional is refused."""
        C = covariance_C(NN, LATTICE, 1.0, 0.0)
        E = ExpectationFunctional.gaussian_mc(C, 3, np.random.default_rng(1))
        with self.assertRaises(ExpectationError):
            check_rg_consistency(_state(1), E, 0.0, _U_next(1), None, [LATTICE.zeros()])

    def test_next_scale_needs_fixed_functional(self):
        """Test the next-scale activity and state refuse a redrawing functional."""
        C = covariance_C(NN, LATTICE, 1.0, 0.0)
        E = ExpectationFunctional.gaussian_mc(C, 3, np.random.default_rng(2))
        for build in (k_next_psi, k_next_bulk, next_state):
            with self.subTest(build=build.__name__):
                with self.assertRaises(ExpectationError) as context:
                    build(_state(1), E, 0.0, _U_next(1))
                self.assertEqual(context.exception.invariant, "fixed-expectation")

    def test_coarse_budget(self):
        """Test the next scale is enumerated only when small."""
        geometry = BlockLattice.at_scale(TorusLattice(2, 3), 0)
        state = _state(1, geometry=geometry, perturbed=False)
        with self.assertRaises(BudgetExceededError):
            k_next_psi(state, self.E, 0.0, _U_next(1))
