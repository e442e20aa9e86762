"""Polymer activities, charge components and regulators.

Every regulator is computed through its logarithm; the exponentials overflow
long before the quantities of interest become meaningless. Scales are carried
by the block lattice of the polymer, so fractional scales need no extra
argument: ``∇_j = ℓ_B ∇`` and ``‖f‖²_{L²_j(S)} = ℓ_B^{-2} Σ_{x∈S} f(x)²`` with
``ℓ_B`` the block side.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np

from multigauss.config import RegulatorParams
from multigauss.errors import LatticeError, PeriodicityError
from multigauss.lattice import (
    DIRECTIONS,
    LatticeField,
    SiteMask,
    grad,
    grad_n_sitewise,
    norm_C2j,
    shift,
)
from multigauss.multiscale import fractional_base
from multigauss.polymers import (
    BlockLattice,
    Polymer,
    block_star_mask,
    boundary,
    closure,
    components,
    l1_neighbourhood,
    refine,
    small_set_neighbourhood,
)

log: logging.Logger = logging.getLogger("multigauss.activities")

Evaluator = Callable[[Polymer, LatticeField], float]


@dataclass(frozen=True)
class PolymerActivity:
    """Local functional ``F(X, φ)`` on the polymers of one block lattice.

    ``evaluator`` is only ever called on connected polymers when
    ``factorises`` is set; the value on a general polymer is then the product
    over its components, with ``F(∅) = 1``.

    Attributes:
        geometry: Block lattice of the polymers.
        evaluator: Value on a polymer.
        name: Label for logs.
        factorises: Whether values multiply over components.
    """

    geometry: BlockLattice
    evaluator: Evaluator
    name: str = "K"
    factorises: bool = True

    def __call__(self, X: Polymer, phi: LatticeField) -> float:
        """Evaluate on any polymer."""
        if not self.factorises:
            return self.evaluator(X, phi)
        value = 1.0
        for Y in components(X):
            value *= self.evaluator(Y, phi)
        return value

    def connected(self, Y: Polymer, phi: LatticeField) -> float:
        """Evaluate on a connected polymer."""
        return self.evaluator(Y, phi)

    def dependence(self, X: Polymer) -> SiteMask:
        """Sites the value on ``X`` may depend on (``X*``)."""
        return small_set_neighbourhood(X).site_mask

    def plus(self, other: PolymerActivity) -> PolymerActivity:
        """Sum of two activities on connected polymers."""
        return PolymerActivity(
            self.geometry,
            lambda Y, phi: self.evaluator(Y, phi) + other.evaluator(Y, phi),
            f"{self.name}+{other.name}",
            self.factorises,
        )

    def scaled(self, factor: float) -> PolymerActivity:
        """The activity multiplied by a scalar on connected polymers."""
        return PolymerActivity(
            self.geometry,
            lambda Y, phi: factor * self.evaluator(Y, phi),
            f"{factor:g}*{self.name}",
            self.factorises,
        )


@dataclass(frozen=True)
class UCoupling:
    """Coupling constants of ``U_j = ½ s_j |∇φ|²_X + W_j(X, φ)``.

    Attributes:
        s: Gradient coupling ``s_j``.
        z: Charges ``z^{(1)} … z^{(q_max)}``.
        beta: Inverse temperature; sets the period ``2π/√β``.
        block_side: ``L^j`` of the scale the coupling belongs to.
    """

    s: float
    z: tuple[float, ...]
    beta: float
    block_side: int = 1

    def __post_init__(self) -> None:
        """Validate the truncation order."""
        if len(self.z) < 1:
            raise LatticeError("U_j needs at least one charge coefficient", "q-max")

    @property
    def q_max(self) -> int:
        """Highest charge kept."""
        return len(self.z)

    @property
    def period(self) -> float:
        """Period ``2π/√β`` in constant shifts."""
        return 2.0 * math.pi / math.sqrt(self.beta)


def gradient_square(phi: LatticeField, mask: SiteMask) -> float:
    """``|∇φ|²_X = Σ_{x∈X} Σ_{μ∈ê} ½ (∇^μ φ(x))²``."""
    total = 0.0
    for direction in DIRECTIONS:
        total += 0.5 * float(np.sum(grad(phi, (direction,))[mask] ** 2))
    return total


def eval_U(U: UCoupling, X: Polymer, phi: LatticeField) -> float:
    """Evaluate ``U(X, φ)``; ``U(∅) = 0`` and ``U`` is additive over sites."""
    if not X:
        return 0.0
    mask = X.site_mask
    value = 0.5 * U.s * gradient_square(phi, mask)
    root = math.sqrt(U.beta)
    values = phi[mask]
    for q, z in enumerate(U.z, start=1):
        value += z * float(np.sum(np.cos(root * q * values))) / U.block_side**2
    return value


@lru_cache(maxsize=65536)
def _trig_coefficients(
    seed: int, blocks: tuple[int, ...]
) -> tuple[float, float, float, float]:
    rng = np.random.default_rng([seed, len(blocks), *blocks])
    a0, a1, a2 = rng.normal(size=3)
    return float(a0), float(a1), float(a2), float(rng.uniform(0.0, 2.0 * math.pi))


def trig_activity(
    geometry: BlockLattice,
    beta: float,
    amplitude: float,
    seed: int,
    *,
    max_blocks: int = 4,
    origin_only: bool = False,
    name: str = "K",
) -> PolymerActivity:
    """Periodic activity with coefficients drawn from the polymer's block ids.

    ``K(Y, φ) = a·(a_0 + a_1 ⟨cos(√β φ + θ)⟩_Y + a_2 tanh⟨(∇^{e_1} φ)²⟩_Y)``
    on connected ``Y`` with at most ``max_blocks`` blocks, and 0 beyond. It
    depends on ``φ`` only through ``Y`` and one step past it.

    Args:
        geometry: Block lattice.
        beta: Inverse temperature of the period.
        amplitude: Overall factor ``a``.
        seed: Campaign seed mixed with the block ids.
        max_blocks: Largest supported polymer.
        origin_only: Vanish on polymers not containing the origin.
        name: Label.

    Returns:
        PolymerActivity: The activity.
    """
    root = math.sqrt(beta)

    def evaluate(Y: Polymer, phi: LatticeField) -> float:
        if len(Y) > max_blocks or (origin_only and not Y.contains_origin):
            return 0.0
        a0, a1, a2, theta = _trig_coefficients(seed, Y.blocks)
        mask = Y.site_mask
        wave = float(np.mean(np.cos(root * phi[mask] + theta)))
        slope = float(np.mean((shift(phi, (1, 0)) - phi)[mask] ** 2))
        return amplitude * (a0 + a1 * wave + a2 * math.tanh(slope))

    return PolymerActivity(geometry, evaluate, name)


def with_origin_part(bulk: PolymerActivity, extra: PolymerActivity) -> PolymerActivity:
    """``K(·;(Ψ_k))``: equal to ``bulk`` off the origin, ``bulk + extra`` on it."""

    def evaluate(Y: Polymer, phi: LatticeField) -> float:
        value = bulk.evaluator(Y, phi)
        if Y.contains_origin:
            value += extra.evaluator(Y, phi)
        return value

    return PolymerActivity(
        bulk.geometry, evaluate, f"{bulk.name}_pert", bulk.factorises
    )


def _check_periodic(
    F: Callable[[Polymer, LatticeField], float],
    X: Polymer,
    phi: LatticeField,
    period: float,
) -> None:
    mismatch = abs(F(X, phi + period) - F(X, phi))
    if mismatch > 1e-8:
        raise PeriodicityError(
            f"Activity is not {period:.6g}-periodic (mismatch {mismatch:.3g})",
            "periodic",
        )


def charge_component(
    F: Callable[[Polymer, LatticeField], float],
    q: int,
    X: Polymer,
    phi: LatticeField,
    beta: float,
    points: int = 64,
) -> complex:
    """Charge-``q`` coefficient ``F̂_q(X, φ)`` of a periodic activity.

    The trapezoid rule on ``points`` equispaced shifts is exact for
    trigonometric polynomials of order below ``points/2``.

    Raises:
        PeriodicityError: If ``F`` is not ``2π/√β``-periodic in constant shifts.
    """
    root = math.sqrt(beta)
    period = 2.0 * math.pi / root
    _check_periodic(F, X, phi, period)
    t = period * np.arange(points) / points
    values = np.array([F(X, phi + tk) for tk in t])
    return complex(np.mean(np.exp(-1j * root * q * t) * values))


def charge_components(
    F: Callable[[Polymer, LatticeField], float],
    X: Polymer,
    phi: LatticeField,
    beta: float,
    q_max: int,
    points: int = 64,
) -> dict[int, complex]:
    """All charges ``|q| <= q_max`` from one set of shifted evaluations."""
    period = 2.0 * math.pi / math.sqrt(beta)
    _check_periodic(F, X, phi, period)
    if 2 * q_max >= points:
        raise PeriodicityError(
            f"{points} shifts cannot resolve charges up to {q_max}", "charge-resolution"
        )
    t = period * np.arange(points) / points
    coefficients = np.fft.fft([F(X, phi + tk) for tk in t]) / points
    return {q: complex(coefficients[q % points]) for q in range(-q_max, q_max + 1)}


def neutral_part(
    F: Callable[[Polymer, LatticeField], float],
    X: Polymer,
    phi: LatticeField,
    beta: float,
    points: int = 64,
) -> float:
    """Charge-0 component ``F̂_0(X, φ)`` (real for real ``F``)."""
    return charge_component(F, 0, X, phi, beta, points).real


class Localisation(Protocol):
    """``Loc_{Y,D}`` applied to the map ``φ' -> E[K(Y, φ' + ζ)]``."""

    def __call__(
        self,
        Y: Polymer,
        D: int,
        mean_activity: Callable[[LatticeField], float],
        phi: LatticeField,
    ) -> float:
        """Localised value at ``φ'`` on block ``D`` of ``Y``."""
        ...


class ZeroLoc:
    """Localisation that discards everything."""

    def __call__(
        self,
        Y: Polymer,
        D: int,
        mean_activity: Callable[[LatticeField], float],
        phi: LatticeField,
    ) -> float:
        """Return 0."""
        return 0.0


class ConstantLoc:
    """Zero-field value of the mean activity shared equally by the blocks of ``Y``."""

    def __call__(
        self,
        Y: Polymer,
        D: int,
        mean_activity: Callable[[LatticeField], float],
        phi: LatticeField,
    ) -> float:
        """Return ``E[K(Y, ζ)] / |Y|_j``."""
        return mean_activity(np.zeros_like(phi)) / len(Y)


@lru_cache(maxsize=8192)
def _star(geometry: BlockLattice, block: int) -> SiteMask:
    return block_star_mask(geometry, block)


def _sup_on(values: LatticeField, mask: SiteMask) -> float:
    return float(values[mask].max(initial=0.0))


def _l2_gradient(phi: LatticeField, mask: SiteMask) -> float:
    # ‖∇_j φ‖²_{L²_j(S)}: the block-side factors cancel.
    return 2.0 * gradient_square(phi, mask)


def _w_sum(phi: LatticeField, X: Polymer, orders: Sequence[int]) -> float:
    """``Σ_{B∈X} Σ_{a∈orders} ‖∇^a_j φ‖²_{L^∞(B*)}``."""
    side = X.geometry.block_side
    sitewise = {a: grad_n_sitewise(phi, a) for a in orders}
    total = 0.0
    for block in X.blocks:
        star = _star(X.geometry, block)
        for a in orders:
            total += (side**a * _sup_on(sitewise[a], star)) ** 2
    return total


def log_regulator_G(params: RegulatorParams, X: Polymer, phi: LatticeField) -> float:
    """``log G_j(X, φ)`` at the scale of ``X``."""
    if not X:
        return 0.0
    bulk = _l2_gradient(phi, X.site_mask)
    edge = _l2_gradient(phi, boundary(X))
    return params.kappa * (bulk + params.c2 * edge + _w_sum(phi, X, (2,)))


def regulator_G(params: RegulatorParams, X: Polymer, phi: LatticeField) -> float:
    """Large-field regulator ``G_j(X, φ)``.

    ``exp(κ_L(‖∇_jφ‖²_{L²_j(X)} + c_2‖∇_jφ‖²_{L²_j(∂X)} + W_j(X, ∇²_jφ)²))``.
    """
    return math.exp(log_regulator_G(params, X, phi))


def log_strong_g(params: RegulatorParams, X: Polymer, phi: LatticeField) -> float:
    """``log g_j(X, φ) = c_4 κ_L Σ_{a=0,1,2} W_j(X, ∇^a_j φ)²``."""
    return params.c4 * params.kappa * _w_sum(phi, X, (0, 1, 2))


def strong_regulators(
    params: RegulatorParams, X: Polymer, phi: LatticeField
) -> tuple[float, float]:
    """Return ``(w_j(X, φ)², g_j(X, φ))``."""
    side = X.geometry.block_side
    first, second = grad_n_sitewise(phi, 1), grad_n_sitewise(phi, 2)
    w2 = 0.0
    for block in X.blocks:
        star = _star(X.geometry, block)
        w2 += max(
            (side * _sup_on(first, star)) ** 2, (side**2 * _sup_on(second, star)) ** 2
        )
    return w2, math.exp(log_strong_g(params, X, phi))


def log_regulator_G_psi(
    params: RegulatorParams, X: Polymer, phi: LatticeField, u: LatticeField
) -> float:
    """``log G_j^Ψ(X, φ; u_j)``.

    Each supremum over ``t ∈ [0, 1]`` is of a convex function of ``t`` and is
    attained at an endpoint, so only ``t ∈ {0, 1}`` are evaluated.
    """
    if not X:
        return 0.0
    mask, edge = X.site_mask, boundary(X)
    shifted = phi + u
    gradient_terms = max(
        _l2_gradient(field, mask) + params.c2 * _l2_gradient(field, edge)
        for field in (phi, shifted)
    )
    side = X.geometry.block_side
    second = (grad_n_sitewise(phi, 2), grad_n_sitewise(shifted, 2))
    w_psi = 0.0
    for block in X.blocks:
        star = _star(X.geometry, block)
        w_psi += max((side**2 * _sup_on(values, star)) ** 2 for values in second)
    return params.kappa * (gradient_terms + w_psi)


def regulator_G_psi(
    params: RegulatorParams, X: Polymer, phi: LatticeField, u: LatticeField
) -> float:
    """``G_j^Ψ(X, φ; u_j)``; see :func:`log_regulator_G_psi`."""
    return math.exp(log_regulator_G_psi(params, X, phi, u))


def log_regulator_G_psi_grid(
    params: RegulatorParams,
    X: Polymer,
    phi: LatticeField,
    u: LatticeField,
    points: int = 101,
) -> float:
    """``log G_j^Ψ`` with every supremum taken over a ``t``-grid instead."""
    if not X:
        return 0.0
    mask, edge = X.site_mask, boundary(X)
    ts = np.linspace(0.0, 1.0, points)
    gradient_terms = max(
        _l2_gradient(phi + t * u, mask) + params.c2 * _l2_gradient(phi + t * u, edge)
        for t in ts
    )
    side = X.geometry.block_side
    second = [grad_n_sitewise(phi + t * u, 2) for t in ts]
    w_psi = 0.0
    for block in X.blocks:
        star = _star(X.geometry, block)
        w_psi += max((side**2 * _sup_on(values, star)) ** 2 for values in second)
    return params.kappa * (gradient_terms + w_psi)


@dataclass(frozen=True)
class ZeroFieldBound:
    """``G_j^Ψ(X, 0; u_j)`` against ``exp(C κ_L ‖u_j‖²_{C²_j})``."""

    value: float
    constant: float
    bound: float

    @property
    def holds(self) -> bool:
        """True if the value does not exceed the bound."""
        return self.value <= self.bound * (1 + 1e-12)


def regulator_G_psi_zero_bound(
    params: RegulatorParams, X: Polymer, u: LatticeField
) -> ZeroFieldBound:
    """Evaluate ``G_j^Ψ(X, 0; u_j)`` and its ``C(M_u)`` bound.

    The constant counts the sites where ``∇u`` can be nonzero and the blocks
    whose ``B*`` meets the reach of ``∇²u``; it does not depend on ``X``.
    """
    geometry = X.geometry
    side = geometry.block_side
    support = np.abs(u) > 0
    first_reach = l1_neighbourhood(support, 1)
    second_reach = l1_neighbourhood(support, 2)
    blocks = sum(
        1
        for block in range(geometry.n_blocks)
        if np.any(_star(geometry, block) & second_reach)
    )
    constant = (1.0 + params.c2) * 4.0 * float(first_reach.sum()) / side**2 + blocks
    norm = norm_C2j(u, geometry.scale, geometry.lattice.L)
    value = regulator_G_psi(params, X, np.zeros_like(u), u)
    return ZeroFieldBound(value, constant, math.exp(constant * params.kappa * norm**2))


@dataclass(frozen=True)
class TjEstimate:
    """Finite lower bound of ``Σ_n h^n/n! ‖D^n F(X, φ)‖``.

    Attributes:
        value: The truncated sum.
        terms: Per-order terms ``h^n/n! · max |D^n F(f_1..f_n)|``.
        unstable: True if a Richardson check disagreed by more than 10%.
    """

    value: float
    terms: tuple[float, ...]
    unstable: bool


def _directional(
    F: Callable[[LatticeField], float],
    phi: LatticeField,
    fields: Sequence[LatticeField],
    step: float,
) -> float:
    total = 0.0
    for signs in itertools.product((1.0, -1.0), repeat=len(fields)):
        terms = (s * p for s, p in zip(signs, fields, strict=True))
        direction = sum(terms, np.zeros_like(phi))
        total += math.prod(signs) * F(phi + step * direction)
    return total / (2.0 * step) ** len(fields)


def tj_seminorm_estimate(
    F: Callable[[Polymer, LatticeField], float],
    X: Polymer,
    phi: LatticeField,
    h: float,
    n_max: int,
    directions: Sequence[LatticeField],
    step: float = 1e-2,
) -> TjEstimate:
    """Lower bound of the ``T_j(X, φ)`` seminorm.

    Mixed derivatives come from nested central differences; each is checked
    against the half step and replaced by its Richardson extrapolation.
    Directions with ``‖f‖_{C²_j(X*)} > 1`` are rescaled to norm 1.

    Args:
        F: Activity.
        X: Polymer.
        phi: Base field.
        h: Derivative weight.
        n_max: Highest derivative order.
        directions: Test directions.
        step: Finite-difference step.

    Returns:
        TjEstimate: Lower bound, per-order terms and stability flag.
    """
    geometry = X.geometry
    star = small_set_neighbourhood(X).site_mask
    scaled: list[LatticeField] = []
    for g in directions:
        norm = norm_C2j(g, geometry.scale, geometry.lattice.L, star)
        scaled.append(g / norm if norm > 1.0 else g)

    def restricted(field: LatticeField) -> float:
        return F(X, field)

    terms: list[float] = [abs(restricted(phi))]
    unstable = False
    for n in range(1, n_max + 1):
        best = 0.0
        for combo in itertools.combinations_with_replacement(range(len(scaled)), n):
            chosen = [scaled[i] for i in combo]
            coarse = _directional(restricted, phi, chosen, step)
            fine = _directional(restricted, phi, chosen, step / 2)
            extrapolated = (4.0 * fine - coarse) / 3.0
            if abs(coarse - fine) > 0.1 * abs(extrapolated) + 1e-8:
                unstable = True
            best = max(best, abs(extrapolated))
        terms.append(h**n / math.factorial(n) * best)

    if unstable:
        log.debug("Finite-difference derivatives of %s are unstable", X.blocks)
    return TjEstimate(float(sum(terms)), tuple(terms), unstable)


@dataclass(frozen=True)
class ChangeOfScaleResult:
    """Both sides of the change-of-scale inequality on one instance (logs)."""

    lhs: float
    g_side: float
    G_side: float

    @property
    def rhs(self) -> float:
        """Logarithm of the right-hand side."""
        return self.g_side + self.G_side

    @property
    def margin(self) -> float:
        """``log RHS - log LHS``; nonnegative when the instance passes."""
        return self.rhs - self.lhs

    @property
    def passed(self) -> bool:
        """True if ``LHS <= RHS`` up to rounding."""
        return self.margin >= -1e-12 * max(1.0, abs(self.lhs))


def check_change_of_scale_instance(
    params: RegulatorParams,
    X: Polymer,
    phi: LatticeField,
    xi_o: LatticeField,
    xi_blocks: Mapping[int, LatticeField],
    coarse: BlockLattice | None = None,
) -> ChangeOfScaleResult:
    """Evaluate the change-of-scale inequality for one instance.

    The left side is
    ``log G_{j+s}(X, φ, ξ_o, (ξ_B)) = κ‖∇(φ+ξ_o)‖²_{L²(X)} + κc_2‖∇(φ+ξ_o)‖²_{L²(∂X)}
    + κΣ_B ‖∇²(φ+ξ_B)‖²_{L^∞(B*)}`` and the right side is
    ``max_a log g_{j+s}(X', ξ_a) + log G_{j+s+1/M}(X', φ)`` with ``X'`` the
    closure of ``X`` at the next fractional scale.

    Args:
        params: Regulator parameters; ``params.M`` sets the fractional step.
        X: Connected polymer at scale ``j+s``.
        phi: Field.
        xi_o: Shift of the gradient terms.
        xi_blocks: Per-block shifts of the second-derivative terms.
        coarse: Next fractional scale; defaults to blocks ``L**(1/M)`` larger.

    Returns:
        ChangeOfScaleResult: Both sides in logarithmic form.
    """
    fine = X.geometry
    if coarse is None:
        base = fractional_base(fine.lattice.L, params.M) if params.M > 1 else None
        coarse = fine.coarser(base)
    mask, edge = X.site_mask, boundary(X)
    shifted = phi + xi_o
    lhs = _l2_gradient(shifted, mask) + params.c2 * _l2_gradient(shifted, edge)
    side = fine.block_side
    for block in X.blocks:
        values = grad_n_sitewise(phi + xi_blocks.get(block, 0.0), 2)
        lhs += (side**2 * _sup_on(values, _star(fine, block))) ** 2
    lhs *= params.kappa

    X_coarse = closure(X, coarse)
    X_fine = refine(X_coarse, fine)
    shifts = [xi_o, *(xi_blocks[b] for b in X.blocks if b in xi_blocks)]
    g_side = max(log_strong_g(params, X_fine, xi) for xi in shifts)
    return ChangeOfScaleResult(lhs, g_side, log_regulator_G(params, X_coarse, phi))
