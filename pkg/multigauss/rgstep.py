"""Polymer-gas partition functions and one renormalisation step.

The step maps ``(E_j, e_j, U_j, K_j, Ψ_j)`` at scale ``j`` to scale ``j+1``.
Everything here is exact finite algebra over enumerated polymers; the
identity checkers compare two independent evaluations of the same number.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property

import numpy as np
import numpy.typing as npt
from numpy.polynomial.hermite_e import hermegauss

from multigauss.activities import (
    Localisation,
    PolymerActivity,
    UCoupling,
    ZeroLoc,
    eval_U,
    neutral_part,
)
from multigauss.errors import BudgetExceededError, ExpectationError
from multigauss.lattice import LatticeField
from multigauss.multiscale import sample_scale
from multigauss.polymers import (
    BlockLattice,
    Polymer,
    all_polymers,
    closure,
    components,
    is_connected,
    refine,
    small_set_neighbourhood,
    small_sets,
    small_sets_containing,
    subpolymers,
    touches,
)
from multigauss.spectral import DiagonalOperator, dense_matrix

log: logging.Logger = logging.getLogger("multigauss.rgstep")

COARSE_BLOCK_BUDGET: int = 4
GAUSS_HERMITE_BUDGET: int = 4096


class ExpectationKind(str, Enum):
    """How an expectation functional integrates over the fluctuation field."""

    EMPIRICAL = "empirical"
    GAUSSIAN_MC = "gaussian-mc"
    GAUSSIAN_EXACT_SMALL = "gaussian-exact-small"


@dataclass(frozen=True, eq=False)
class ExpectationFunctional:
    """Linear functional ``F -> E[F(ζ)]`` given by weighted nodes.

    Fixed kinds hold their nodes; the Monte Carlo kind draws a fresh batch
    from ``covariance`` at every use.

    Attributes:
        kind: Integration scheme.
        nodes: Field samples, shape ``(k, side, side)``; empty for Monte Carlo.
        weights: Node weights summing to 1.
        covariance: Covariance of ``ζ`` for the Monte Carlo kind.
        batch: Monte Carlo batch size.
        rng: Monte Carlo random stream.
    """

    kind: ExpectationKind
    nodes: npt.NDArray[np.float64]
    weights: npt.NDArray[np.float64]
    covariance: DiagonalOperator | None = None
    batch: int = 0
    rng: np.random.Generator | None = field(default=None, compare=False)

    @classmethod
    def empirical(cls, samples: npt.NDArray[np.float64]) -> ExpectationFunctional:
        """Uniform average over a fixed sample set."""
        samples = np.asarray(samples, dtype=float)
        weights = np.full(len(samples), 1.0 / len(samples))
        return cls(ExpectationKind.EMPIRICAL, samples, weights)

    @classmethod
    def from_covariance(
        cls, covariance: DiagonalOperator, n: int, rng: np.random.Generator
    ) -> ExpectationFunctional:
        """Empirical functional over ``n`` fixed draws from ``covariance``."""
        return cls.empirical(sample_scale(covariance, rng, n))

    @classmethod
    def gaussian_mc(
        cls, covariance: DiagonalOperator, n: int, rng: np.random.Generator
    ) -> ExpectationFunctional:
        """Monte Carlo functional redrawing ``n`` samples at every use."""
        empty = np.empty((0, *covariance.lattice.shape))
        return cls(ExpectationKind.GAUSSIAN_MC, empty, np.empty(0), covariance, n, rng)

    @classmethod
    def gaussian_exact_small(
        cls,
        covariance: DiagonalOperator,
        points: int = 3,
        budget: int = GAUSS_HERMITE_BUDGET,
    ) -> ExpectationFunctional:
        """Tensor Gauss-Hermite rule over the eigenmodes of ``covariance``.

        Exact for polynomials of degree below ``2 * points`` in every mode.

        Raises:
            BudgetExceededError: If ``points**modes`` exceeds ``budget``.
        """
        matrix = dense_matrix(covariance)
        eigenvalues, eigenvectors = np.linalg.eigh(matrix)
        keep = eigenvalues > 1e-12 * max(float(eigenvalues.max()), 1e-300)
        modes = int(keep.sum())
        count = points**modes
        if count > budget:
            raise BudgetExceededError(
                f"Gauss-Hermite rule with {points} points on {modes} modes"
                f" needs {count} nodes",
                count,
                budget,
            )
        x, w = hermegauss(points)
        w = w / w.sum()
        scaled = eigenvectors[:, keep] * np.sqrt(eigenvalues[keep])
        shape = covariance.lattice.shape
        nodes, weights = [], []
        for idx in itertools.product(range(points), repeat=modes):
            nodes.append((scaled @ x[list(idx)]).reshape(shape))
            weights.append(float(np.prod(w[list(idx)])))
        return cls(
            ExpectationKind.GAUSSIAN_EXACT_SMALL, np.array(nodes), np.array(weights)
        )

    @property
    def is_fixed(self) -> bool:
        """True if repeated use integrates against the same nodes."""
        return self.kind is not ExpectationKind.GAUSSIAN_MC

    def sample_set(self) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Nodes and weights for one use."""
        if self.is_fixed:
            return self.nodes, self.weights
        assert self.covariance is not None and self.rng is not None
        draws = sample_scale(self.covariance, self.rng, self.batch)
        return draws, np.full(self.batch, 1.0 / self.batch)

    def expect(self, fn: Callable[[LatticeField], float]) -> float:
        """``E[fn(ζ)]``."""
        nodes, weights = self.sample_set()
        return float(sum(w * fn(zeta) for zeta, w in zip(nodes, weights, strict=True)))

    def require_fixed(self, context: str) -> None:
        """Reject functionals whose nodes change between uses.

        Raises:
            ExpectationError: For the Monte Carlo kind.
        """
        if not self.is_fixed:
            raise ExpectationError(
                f"{context} needs a fixed expectation functional,"
                f" got {self.kind.value}",
                "fixed-expectation",
            )


def _require_functional(E: object) -> ExpectationFunctional:
    if not isinstance(E, ExpectationFunctional):
        raise ExpectationError(
            f"Expected a linear ExpectationFunctional, got {type(E).__name__}",
            "linear-expectation",
        )
    return E


@dataclass(frozen=True)
class RGState:
    """Coordinates of the polymer gas at one scale.

    Attributes:
        geometry: Blocks of the scale.
        E: Bulk energy per site ``E_j``.
        e: One-point energy ``e_j``.
        U: Coupling of ``U_j``.
        K_bulk: ``K_j(·; 0)``.
        K_pert: ``K_j(·; (Ψ_k)_{k<j})``.
        psi: ``Ψ_j``, or ``None``.
    """

    geometry: BlockLattice
    E: float
    e: float
    U: UCoupling
    K_bulk: PolymerActivity
    K_pert: PolymerActivity
    psi: PolymerActivity | None = None

    @cached_property
    def activity(self) -> PolymerActivity:
        """``K_pert + Ψ`` on connected polymers, extended over components."""
        if self.psi is None:
            return self.K_pert
        return self.K_pert.plus(self.psi)

    def violations(self, phi: LatticeField) -> list[str]:
        """Connected polymers breaking the off-origin conditions at ``φ``."""
        problems: list[str] = []
        for X in all_polymers(self.geometry):
            if not X or X.contains_origin or not is_connected(X):
                continue
            gap = self.K_pert.connected(X, phi) - self.K_bulk.connected(X, phi)
            if abs(gap) > 1e-12:
                problems.append(f"K_pert differs from K_bulk on {X.to_json()}")
            if self.psi is not None and abs(self.psi.connected(X, phi)) > 1e-12:
                problems.append(f"Ψ is nonzero on {X.to_json()}")
        return problems

    def describe(self) -> dict[str, object]:
        """JSON-ready summary of the scalar coordinates."""
        return {
            "block_side": self.geometry.block_side,
            "E": self.E,
            "e": self.e,
            "s": self.U.s,
            "z": list(self.U.z),
            "beta": self.U.beta,
            "has_psi": self.psi is not None,
        }


def eval_Z(state: RGState, phi: LatticeField) -> float:
    """``e^{-E|Λ| + e} Σ_{X∈𝓟_j} e^{U_j(Λ∖X, φ)} K(X, φ)``.

    Raises:
        BudgetExceededError: If the scale has more than 16 blocks.
    """
    whole = state.geometry.whole()
    K = state.activity
    total = 0.0
    for X in all_polymers(state.geometry):
        value = K(X, phi)
        if value != 0.0:
            total += math.exp(eval_U(state.U, whole.difference(X), phi)) * value
    return math.exp(-state.E * state.geometry.lattice.n_sites + state.e) * total


def polymer_power(
    F: Callable[[Polymer, LatticeField], float], X: Polymer, phi: LatticeField
) -> float:
    """``F^X = ∏_{B∈𝓑(X)} F(B)``."""
    return math.prod(F(B, phi) for B in X.single_blocks())


def polymer_bracket(
    F: Callable[[Polymer, LatticeField], float], X: Polymer, phi: LatticeField
) -> float:
    """``F^{[X]} = ∏_{Y∈Comp(X)} F(Y)``."""
    return math.prod(F(Y, phi) for Y in components(X))


def f_psi(u: LatticeField, U: UCoupling, K: PolymerActivity) -> PolymerActivity:
    """Activity ``Ψ`` absorbing the shift ``φ -> φ + u`` into the polymer gas.

    On connected ``X``:
    ``Ψ(X, φ) = -K(X, φ) + Σ_{Y⊂X} ∏_{B∈X∖Y} (e^{U(B, φ+u)} - e^{U(B, φ)}) K(Y, φ+u)``.
    """

    def evaluate(X: Polymer, phi: LatticeField) -> float:
        shifted = phi + u
        delta = {
            B.blocks[0]: math.exp(eval_U(U, B, shifted)) - math.exp(eval_U(U, B, phi))
            for B in X.single_blocks()
        }
        total = -K(X, phi)
        for Y in subpolymers(X):
            weight = math.prod(delta[b] for b in X.blocks if b not in Y)
            if weight != 0.0:
                total += weight * K(Y, shifted)
        return total

    return PolymerActivity(K.geometry, evaluate, f"Psi[{K.name}]")


@dataclass(frozen=True)
class IdentityCheck:
    """Residuals of an identity over field samples."""

    residuals: tuple[float, ...]

    @property
    def max_residual(self) -> float:
        """Largest residual, 0 for no samples."""
        return max(self.residuals, default=0.0)


def check_reblocking(
    state: RGState, u: LatticeField, phis: Sequence[LatticeField]
) -> IdentityCheck:
    """Compare ``Z_j(φ + u)`` with the gas where ``Ψ = f_psi(u, U_j, K_j)``."""
    K = state.activity
    absorbed = replace(state, K_bulk=K, K_pert=K, psi=f_psi(u, state.U, K))
    plain = replace(state, K_bulk=K, K_pert=K, psi=None)
    residuals = tuple(
        abs(eval_Z(plain, phi + u) - eval_Z(absorbed, phi)) for phi in phis
    )
    log.debug(
        "Reblocking residual %.3g over %d fields",
        max(residuals, default=0.0),
        len(phis),
    )
    return IdentityCheck(residuals)


def _neutral_difference(state: RGState) -> Callable[[Polymer, LatticeField], float]:
    def evaluate(X: Polymer, phi: LatticeField) -> float:
        value = state.K_pert.connected(X, phi) - state.K_bulk.connected(X, phi)
        if state.psi is not None:
            value += state.psi.connected(X, phi)
        return value

    return evaluate


def origin_terms(
    state: RGState, E: ExpectationFunctional
) -> dict[tuple[int, ...], float]:
    """``E[Ψ̂_0(X, ζ) + K̂_pert,0(X, ζ) - K̂_bulk,0(X, ζ)]`` per small set ``X ∋ 0``."""
    E = _require_functional(E)
    difference = _neutral_difference(state)
    beta = state.U.beta
    nodes, weights = E.sample_set()
    terms: dict[tuple[int, ...], float] = {}
    for X in small_sets_containing(state.geometry, state.geometry.origin_block):
        terms[X.blocks] = float(
            sum(
                w * neutral_part(difference, X, zeta, beta)
                for zeta, w in zip(nodes, weights, strict=True)
            )
        )
    return terms


def e_next(state: RGState, E: ExpectationFunctional) -> float:
    """One-point energy ``𝔢_{j+1}`` created by the perturbation at the origin."""
    return float(sum(origin_terms(state, E).values()))


def s_reblock(
    F: PolymerActivity, coarse: BlockLattice | None = None
) -> PolymerActivity:
    """``(𝕊F)(X') = Σ_{Y connected, Ȳ = X'} F(Y)`` on connected ``X'``.

    Raises:
        BudgetExceededError: If a polymer refines to more than 16 blocks.
    """
    fine = F.geometry
    coarse = coarse or fine.coarser()

    def evaluate(X: Polymer, phi: LatticeField) -> float:
        total = 0.0
        for Y in subpolymers(refine(X, fine)):
            if Y and is_connected(Y) and closure(Y, coarse) == X:
                total += F.connected(Y, phi)
        return total

    return PolymerActivity(coarse, evaluate, f"S[{F.name}]")


def _labelings(n: int) -> Iterator[tuple[int, ...]]:
    # 0: outside T, 1: X_0, 2: X_1, 3: Z
    return itertools.product(range(4), repeat=n)


class _NextScaleTable:
    """Values of ``K_{j+1}`` on every ``(j+1)``-polymer at one field ``φ'``."""

    def __init__(
        self,
        state: RGState,
        E: ExpectationFunctional,
        calE: float,
        U_next: UCoupling,
        loc: Localisation,
        coarse: BlockLattice,
    ) -> None:
        if coarse.n_blocks > COARSE_BLOCK_BUDGET:
            raise BudgetExceededError(
                f"The next scale has {coarse.n_blocks} blocks, at most "
                f"{COARSE_BLOCK_BUDGET} are enumerated",
                coarse.n_blocks,
                COARSE_BLOCK_BUDGET,
            )
        self.state = state
        self.E = E
        self.calE = calE
        self.U_next = U_next
        self.loc = loc
        self.coarse = coarse
        self.origin = origin_terms(state, E)
        self.e_next = float(sum(self.origin.values()))
        self.stars = {
            B: small_set_neighbourhood(Polymer(coarse, (B,))).blocks
            for B in range(coarse.n_blocks)
        }
        self._cache: dict[bytes, dict[tuple[int, ...], float]] = {}

    def __call__(self, X: Polymer, phi: LatticeField) -> float:
        return self.table(phi).get(X.blocks, 0.0)

    def table(self, phi: LatticeField) -> dict[tuple[int, ...], float]:
        key = np.ascontiguousarray(phi).tobytes()
        if key not in self._cache:
            if len(self._cache) > 256:
                self._cache.clear()
            self._cache[key] = self._build(phi)
        return self._cache[key]

    def _q(self, phi: LatticeField) -> dict[tuple[int, tuple[int, ...]], float]:
        state, E = self.state, self.E
        fine = state.geometry
        nodes, weights = E.sample_set()
        q: dict[tuple[int, tuple[int, ...]], float] = {}
        for D in range(fine.n_blocks):
            for Y in small_sets_containing(fine, D):

                def mean_bulk(field: LatticeField, Y: Polymer = Y) -> float:
                    return float(
                        sum(
                            w * state.K_bulk.connected(Y, field + zeta)
                            for zeta, w in zip(nodes, weights, strict=True)
                        )
                    )

                value = self.loc(Y, D, mean_bulk, phi)
                if D == fine.origin_block:
                    value += self.origin[Y.blocks]
                q[(D, Y.blocks)] = value
        return q

    def j_psi(self, phi: LatticeField) -> dict[tuple[int, tuple[int, ...]], float]:
        """``J^Ψ(B, X')`` keyed by ``(B, X'.blocks)``; absent keys are 0."""
        fine = self.state.geometry
        by_closure: dict[tuple[int, tuple[int, ...]], float] = {}
        totals: dict[int, float] = {}
        for (D, blocks), value in self._q(phi).items():
            B = closure(Polymer(fine, (D,)), self.coarse).blocks[0]
            target = closure(Polymer(fine, blocks), self.coarse).blocks
            by_closure[(B, target)] = by_closure.get((B, target), 0.0) + value
            totals[B] = totals.get(B, 0.0) + value
        J: dict[tuple[int, tuple[int, ...]], float] = {}
        for (B, target), value in by_closure.items():
            if B in target:
                J[(B, target)] = value
        for B, total in totals.items():
            J[(B, (B,))] = J.get((B, (B,)), 0.0) - total
        return J

    def _build(self, phi_prime: LatticeField) -> dict[tuple[int, ...], float]:
        state, coarse = self.state, self.coarse
        fine = state.geometry
        K = state.activity
        J = self.j_psi(phi_prime)
        calE_K: dict[tuple[int, ...], float] = {}
        for (B, target), value in J.items():
            calE_K[target] = calE_K.get(target, 0.0) + value

        nodes, weights = self.E.sample_set()
        blocks = [Polymer(coarse, (B,)) for B in range(coarse.n_blocks)]
        shift = {
            B: -self.calE * P.n_sites
            + (self.e_next if P.contains_origin else 0.0)
            + eval_U(self.U_next, P, phi_prime)
            for B, P in enumerate(blocks)
        }
        deltas = np.array(
            [
                [
                    math.exp(eval_U(state.U, P, phi_prime + zeta)) - math.exp(shift[B])
                    for B, P in enumerate(blocks)
                ]
                for zeta in nodes
            ]
        )
        kbar_cache: dict[tuple[int, tuple[int, ...]], float] = {}

        def kbar(k: int, C: Polymer) -> float:
            key = (k, C.blocks)
            if key not in kbar_cache:
                phi = phi_prime + nodes[k]
                inner = refine(C, fine)
                total = 0.0
                for Y in subpolymers(inner):
                    if Y and closure(Y, coarse) == C:
                        value = K(Y, phi)
                        if value != 0.0:
                            rest = inner.difference(Y)
                            total += math.exp(eval_U(state.U, rest, phi)) * value
                kbar_cache[key] = total
            return kbar_cache[key]

        table: dict[tuple[int, ...], float] = {}
        for labels in _labelings(coarse.n_blocks):
            X0 = coarse.polymer(b for b, lab in enumerate(labels) if lab == 1)
            X1 = coarse.polymer(b for b, lab in enumerate(labels) if lab == 2)
            Z = coarse.polymer(b for b, lab in enumerate(labels) if lab == 3)
            if X1 and Z and touches(X1, Z):
                continue
            T = X0.union(X1).union(Z)
            z_parts = components(Z)
            x1_parts = components(X1)
            for chosen in itertools.product(*(P.blocks for P in z_parts)):
                j_weight = math.prod(
                    J.get((B, P.blocks), 0.0)
                    for B, P in zip(chosen, z_parts, strict=True)
                )
                if j_weight == 0.0:
                    continue
                # Z ⊂ ∪B* whenever the J factors are nonzero; T is added for safety.
                X_blocks = set(T.blocks)
                for B in chosen:
                    X_blocks.update(self.stars[B])
                X = coarse.polymer(X_blocks)
                stochastic = 0.0
                for k, w in enumerate(weights):
                    term = math.prod(deltas[k, b] for b in X0.blocks)
                    for P in x1_parts:
                        term *= kbar(k, P) - calE_K.get(P.blocks, 0.0)
                    stochastic += w * term
                weight = math.exp(
                    self.calE * T.n_sites
                    - (self.e_next if T.contains_origin else 0.0)
                    + eval_U(self.U_next, X.difference(T), phi_prime)
                )
                contribution = weight * stochastic * j_weight
                table[X.blocks] = table.get(X.blocks, 0.0) + contribution
        return table


def k_next_psi(
    state: RGState,
    E: ExpectationFunctional,
    calE: float,
    U_next: UCoupling,
    loc: Localisation | None = None,
) -> PolymerActivity:
    """``K^Ψ_{j+1}`` as a non-factorising activity on the next scale.

    Args:
        state: Scale-``j`` coordinates.
        E: Expectation over ``ζ``.
        calE: Bulk energy increment ``𝓔_{j+1}``.
        U_next: Coupling of ``U_{j+1}``.
        loc: Localisation inside ``Q^Ψ``; defaults to :class:`ZeroLoc`.

    Returns:
        PolymerActivity: ``X -> K^Ψ_{j+1}(X, φ')`` with ``K^Ψ_{j+1}(∅) = 1``.

    Raises:
        BudgetExceededError: If the next scale has more than 4 blocks.
        ExpectationError: If ``E`` is not an expectation functional or
            redraws its samples between calls.
    """
    E = _require_functional(E)
    E.require_fixed("The next-scale activity")
    table = _NextScaleTable(
        state, E, calE, U_next, loc or ZeroLoc(), state.geometry.coarser()
    )
    return PolymerActivity(table.coarse, table, "K_next", factorises=False)


def k_next_bulk(
    state: RGState,
    E: ExpectationFunctional,
    calE: float,
    U_next: UCoupling,
    loc: Localisation | None = None,
) -> PolymerActivity:
    """``K_{j+1}`` without perturbation, target polymer by target polymer.

    Only the bulk activity enters, with ``𝔢_{j+1} = 0``. Used as an
    independent evaluation of :func:`k_next_psi` when ``Ψ = 0`` and
    ``K_pert = K_bulk``.
    """
    E = _require_functional(E)
    E.require_fixed("The next-scale activity")
    loc = loc or ZeroLoc()
    fine = state.geometry
    coarse = fine.coarser()
    if coarse.n_blocks > COARSE_BLOCK_BUDGET:
        raise BudgetExceededError(
            f"The next scale has {coarse.n_blocks} blocks",
            coarse.n_blocks,
            COARSE_BLOCK_BUDGET,
        )
    K = state.K_bulk

    def J(B: int, X: Polymer, phi_prime: LatticeField) -> float:
        if B not in X:
            return 0.0
        total = 0.0
        for Y in small_sets(fine):
            Y_bar = closure(Y, coarse)
            indicator = float(Y_bar == X) - float(X.blocks == (B,))
            if indicator == 0.0:
                continue

            def mean(field: LatticeField, Y: Polymer = Y) -> float:
                return E.expect(lambda zeta: K.connected(Y, field + zeta))

            for D in Y.blocks:
                if closure(Polymer(fine, (D,)), coarse).blocks != (B,):
                    continue
                total += indicator * loc(Y, D, mean, phi_prime)
        return total

    def calE_K(X: Polymer, phi_prime: LatticeField) -> float:
        return sum(J(B, X, phi_prime) for B in X.blocks)

    def kbar(X: Polymer, phi: LatticeField) -> float:
        inner = refine(X, fine)
        total = 0.0
        for Y in all_polymers(fine):
            if Y and Y.issubset(inner) and closure(Y, coarse) == X:
                total += math.exp(eval_U(state.U, inner.difference(Y), phi)) * K(Y, phi)
        return total

    def evaluate(X: Polymer, phi_prime: LatticeField) -> float:
        total = 0.0
        for X0 in subpolymers(X):
            for X1 in subpolymers(X.difference(X0)):
                for Z in subpolymers(X.difference(X0).difference(X1)):
                    if X1 and Z and touches(X1, Z):
                        continue
                    parts = components(Z)
                    T = X0.union(X1).union(Z)
                    for chosen in itertools.product(*(P.blocks for P in parts)):
                        cover = X0.union(X1).union(Z)
                        for B in chosen:
                            block = Polymer(coarse, (B,))
                            cover = cover.union(small_set_neighbourhood(block))
                        if cover != X:
                            continue
                        j_weight = 1.0
                        for B, P in zip(chosen, parts, strict=True):
                            j_weight *= J(B, P, phi_prime)
                        if j_weight == 0.0:
                            continue

                        def integrand(zeta: LatticeField) -> float:
                            phi = phi_prime + zeta

                            def delta(B: Polymer, _: LatticeField) -> float:
                                u_next = eval_U(U_next, B, phi_prime)
                                target = -calE * B.n_sites + u_next
                                current = math.exp(eval_U(state.U, B, phi))
                                return current - math.exp(target)

                            def remainder(P: Polymer, _: LatticeField) -> float:
                                return kbar(P, phi) - calE_K(P, phi_prime)

                            return polymer_power(delta, X0, phi) * polymer_bracket(
                                remainder, X1, phi
                            )

                        total += (
                            math.exp(
                                calE * T.n_sites
                                + eval_U(U_next, X.difference(T), phi_prime)
                            )
                            * E.expect(integrand)
                            * j_weight
                        )
        return total

    return PolymerActivity(coarse, evaluate, "K_next_bulk", factorises=False)


def next_state(
    state: RGState,
    E: ExpectationFunctional,
    calE: float,
    U_next: UCoupling,
    loc: Localisation | None = None,
) -> RGState:
    """Coordinates at scale ``j+1``.

    ``E + 𝓔``, ``e + 𝔢``, ``U_{j+1}`` and ``K^Ψ_{j+1}``.

    Raises:
        ExpectationError: If ``E`` redraws its samples between calls.
    """
    E = _require_functional(E)
    E.require_fixed("The next state")
    table = _NextScaleTable(
        state, E, calE, U_next, loc or ZeroLoc(), state.geometry.coarser()
    )
    K = PolymerActivity(table.coarse, table, "K_next", factorises=False)
    log.debug("Next scale: 𝓔=%.6g, 𝔢=%.6g", calE, table.e_next)
    return RGState(
        geometry=table.coarse,
        E=state.E + calE,
        e=state.e + table.e_next,
        U=U_next,
        K_bulk=K,
        K_pert=K,
    )


@dataclass(frozen=True)
class ConsistencyCheck(IdentityCheck):
    """Residuals of ``E[Z_j(φ' + ζ)] = Z_{j+1}(φ')`` and the one-point energy used."""

    e_next: float = 0.0


def check_rg_consistency(
    state: RGState,
    E: ExpectationFunctional,
    calE: float,
    U_next: UCoupling,
    loc: Localisation | None,
    phis: Sequence[LatticeField],
) -> ConsistencyCheck:
    """Compare the averaged scale-``j`` gas with the scale-``j+1`` gas.

    Raises:
        ExpectationError: If ``E`` is not fixed.
    """
    E = _require_functional(E)
    E.require_fixed("The RG consistency check")
    upper = next_state(state, E, calE, U_next, loc)
    residuals = tuple(
        abs(
            E.expect(lambda zeta, phi=phi: eval_Z(state, phi + zeta))
            - eval_Z(upper, phi)
        )
        for phi in phis
    )
    log.debug(
        "Consistency residual %.3g over %d fields",
        max(residuals, default=0.0),
        len(phis),
    )
    return ConsistencyCheck(residuals, upper.e - state.e)
