"""Smooth test functions and the scale-by-scale external-field schedule."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import numpy as np
import numpy.typing as npt

from multigauss.config import TEST_FUNCTION_DEFAULTS, ProfileKind, RegulatorParams
from multigauss.errors import ScheduleError
from multigauss.lattice import (
    LatticeField,
    StepDistribution,
    TorusLattice,
    laplacian_nn,
    norm_C2j,
    v_J_squared,
)
from multigauss.multiscale import CovarianceDecomposition
from multigauss.polymers import l1_neighbourhood
from multigauss.spectral import (
    QuadratureResult,
    continuum_green_form,
    covariance_Ctilde,
    quadratic_form,
)

log: logging.Logger = logging.getLogger("multigauss.extfield")

TRUNCATION: float = 1e-14
SUPPORT_THRESHOLD: float = 1e-3
MEAN_ZERO_TOLERANCE: float = 1e-10


@dataclass(frozen=True)
class SmoothTestFunction:
    """Continuum test function ``f = ∂_i g`` with radial ``g``.

    ``∫ f = 0`` holds structurally. The Gaussian profile is
    ``e^{-r²/2w²}``; the bump is ``(1 - r²/w²)^4`` on ``r < w``.

    Attributes:
        kind: Profile of ``g``.
        width: Width ``w`` of ``g``.
        direction: Derivative axis ``i``, 1 or 2.
        amplitude: Overall factor of ``g``.
    """

    kind: ProfileKind = ProfileKind.GAUSSIAN_DERIVATIVE
    width: float = 1.0
    direction: int = 1
    amplitude: float = 1.0

    def __post_init__(self) -> None:
        """Validate the descriptor."""
        object.__setattr__(self, "kind", ProfileKind(self.kind))
        if self.width <= 0:
            raise ScheduleError(
                "Test function width must be positive", "width-positive"
            )
        if self.direction not in (1, 2):
            raise ScheduleError("Derivative direction must be 1 or 2", "direction")

    @classmethod
    def from_descriptor(cls, descriptor: dict[str, Any]) -> SmoothTestFunction:
        """Build from a config descriptor such as ``{"kind": ..., "width": ...}``.

        Raises:
            ScheduleError: If the descriptor is malformed.
        """
        unknown = set(descriptor) - set(TEST_FUNCTION_DEFAULTS)
        if unknown:
            raise ScheduleError(
                f"Unknown test function keys: {', '.join(sorted(unknown))}",
                "descriptor",
            )
        values = {**TEST_FUNCTION_DEFAULTS, **descriptor}
        try:
            return cls(
                kind=ProfileKind(values["kind"]),
                width=float(values["width"]),
                direction=int(values["direction"]),
                amplitude=float(values["amplitude"]),
            )
        except (TypeError, ValueError) as e:
            raise ScheduleError(
                f"Invalid test function descriptor: {e}", "descriptor"
            ) from e

    @property
    def support_radius(self) -> float:
        """Radius beyond which ``|g| < 1e-14``, or the exact support radius."""
        if abs(self.amplitude) <= TRUNCATION:
            return 0.0
        if self.kind is ProfileKind.GAUSSIAN_DERIVATIVE:
            ratio = abs(self.amplitude) / TRUNCATION
            return self.width * math.sqrt(2.0 * math.log(ratio))
        return self.width

    def radial_profile(self, r: float) -> float:
        """``g`` at distance ``r``."""
        return float(self.g(np.asarray(r, dtype=float), np.asarray(0.0)))

    def g(
        self, x1: npt.NDArray[np.float64], x2: npt.NDArray[np.float64]
    ) -> npt.NDArray[np.float64]:
        """Evaluate ``g`` on arrays of points."""
        rho = (x1**2 + x2**2) / self.width**2
        if self.kind is ProfileKind.GAUSSIAN_DERIVATIVE:
            return self.amplitude * np.exp(-0.5 * rho)
        bump = (1.0 - np.minimum(rho, 1.0)) ** 4
        return self.amplitude * np.where(rho < 1.0, bump, 0.0)

    def f(
        self, x1: npt.NDArray[np.float64], x2: npt.NDArray[np.float64]
    ) -> npt.NDArray[np.float64]:
        """Evaluate ``f = ∂_i g`` on arrays of points."""
        xi = x1 if self.direction == 1 else x2
        rho = (x1**2 + x2**2) / self.width**2
        if self.kind is ProfileKind.GAUSSIAN_DERIVATIVE:
            return -xi / self.width**2 * self.amplitude * np.exp(-0.5 * rho)
        inside = np.where(rho < 1.0, 1.0 - np.minimum(rho, 1.0), 0.0)
        return -8.0 * xi / self.width**2 * self.amplitude * inside**3

    def scaled(self, factor: float) -> SmoothTestFunction:
        """The same profile with amplitude multiplied by ``factor``."""
        return SmoothTestFunction(
            self.kind, self.width, self.direction, self.amplitude * factor
        )


def build_feps(
    f: SmoothTestFunction, eps: float, lattice: TorusLattice
) -> LatticeField:
    """Lattice test function ``f_ε(x) = ε (g(εx + εe_i) - g(εx))``.

    Values of ``g`` below ``1e-14`` are dropped and the tiny mean left on the
    support is subtracted there, so ``Σ_x f_ε(x) = 0``. The field is centred at
    the origin of the torus.

    Raises:
        ScheduleError: If ``ε`` is outside ``(0, 1)`` or the support does not
            fit the torus.
    """
    if not 0 < eps < 1:
        raise ScheduleError(f"ε must lie in (0, 1), got {eps}", "eps-range")
    radius = f.support_radius
    if lattice.side <= 2.0 * radius / eps:
        raise ScheduleError(
            f"Support radius {radius / eps:.1f} of f_ε does not fit a torus of side "
            f"{lattice.side}",
            "support-fits",
        )
    x1, x2 = (c.astype(float) for c in lattice.centred_coordinates)
    e1, e2 = (1.0, 0.0) if f.direction == 1 else (0.0, 1.0)
    ahead = f.g(eps * (x1 + e1), eps * (x2 + e2))
    here = f.g(eps * x1, eps * x2)
    ahead[np.abs(ahead) < TRUNCATION] = 0.0
    here[np.abs(here) < TRUNCATION] = 0.0
    field = eps * (ahead - here)

    support = field != 0.0
    if np.any(support):
        residual = float(field.sum())
        field[support] -= residual / int(support.sum())
        log.debug("Mean-zeroed f_ε at ε=%g (residual %.3g)", eps, residual)
    return field


def _axis_extent(occupied: npt.NDArray[np.bool_]) -> tuple[int, int]:
    """``(start, length)`` of the shortest circular interval covering ``occupied``."""
    side = occupied.size
    sites = np.flatnonzero(occupied)
    if sites.size == 0:
        return 0, 0
    gaps = np.diff(np.append(sites, sites[0] + side)) - 1
    widest = int(np.argmax(gaps))
    start = int(sites[(widest + 1) % sites.size])
    return start, side - int(gaps[widest])


def support_extent(f: LatticeField) -> tuple[tuple[int, int], tuple[int, int]]:
    """Per-axis ``(start, length)`` of ``supp f ∪ supp Δf`` on the torus."""
    reach = l1_neighbourhood(f != 0.0, 1)
    return _axis_extent(reach.any(axis=1)), _axis_extent(reach.any(axis=0))


def smoothness_scale(f: LatticeField, L: int) -> int:
    """Smallest ``j >= 1`` whose ``¼L^j`` square holds ``supp f ∪ supp Δf``.

    The result is capped at ``N``; a zero field has scale 1.

    Raises:
        ScheduleError: If the support reaches half the torus.
    """
    side = f.shape[0]
    N = round(math.log(side) / math.log(L))
    extent = max(length for _, length in support_extent(f))
    if 2 * extent >= side:
        raise ScheduleError(
            f"Support of f spans {extent} of {side} sites and does not fit a block",
            "support-compact",
        )
    j = 1
    while j < N and L**j < 4 * extent:
        j += 1
    return j


def hierarchy_centre(L: int, N: int) -> int:
    """Coordinate whose offset in every ``L^j`` block is ``(L//2)(L^j - 1)/(L - 1)``.

    For odd ``L`` this is the exact centre of every block containing it; for
    even ``L`` its distance to the upper block edge is
    ``(L^j - 1)(L - 2)/(2(L - 1))``, which vanishes for ``L = 2``.
    """
    return (L // 2) * (L**N - 1) // (L - 1)


@dataclass(frozen=True)
class ExternalFieldSchedule:
    """Per-scale shifts ``u_{j_f} … u_N`` of a centred test function.

    Attributes:
        f: The centred test function.
        j_f: Smoothness scale.
        u: Shifts keyed by scale; absent scales are zero.
        s: Gradient coupling.
        gamma: Coefficient ``γ``.
        massless: True when the zero mode of the covariance is excluded.
        centre: Coordinate the support of ``f`` was moved to.
        margins: Distance from ``supp u_j`` to the edge of its ``j``-block, -1 when
            the support leaves the block.
        tails: Share of ``Σ|u_j|`` outside the ``¾L^j`` box around the centre.
        M_u: ``max_j κ_L ‖u_j‖_{C²_j}``.
        completeness: ``max|γf + C(s,m²)(1 + sγΔ)f - Σ_j u_j|``.
    """

    f: LatticeField
    j_f: int
    u: dict[int, LatticeField]
    s: float
    gamma: float
    massless: bool
    L: int
    N: int
    centre: int
    margins: dict[int, int]
    tails: dict[int, float]
    M_u: float
    completeness: float

    @property
    def a_u_valid(self) -> bool:
        """True if every ``u_j`` with ``j < N`` keeps a block margin above 4."""
        return all(m > 4 for j, m in self.margins.items() if j < self.N)

    def field(self, j: int) -> LatticeField:
        """``u_j``, zero below the smoothness scale."""
        return self.u.get(j, np.zeros_like(self.f))


def block_margin(u: LatticeField, centre: int, block_side: int) -> int:
    """Sites between ``supp u`` and the edge of the block holding ``centre``.

    Returns ``block_side`` for a zero field and -1 when the support leaves the block.
    """
    values = np.abs(u)
    peak = float(values.max())
    if peak == 0.0:
        return block_side
    support = values > SUPPORT_THRESHOLD * peak
    origin = (centre // block_side) * block_side
    local = (np.arange(u.shape[0]) - origin) % u.shape[0]
    inside = local < block_side
    if not np.all(inside[:, None] & inside[None, :] | ~support):
        return -1
    x1, x2 = np.nonzero(support)
    a, b = local[x1], local[x2]
    distances = [a, b, block_side - 1 - a, block_side - 1 - b]
    return int(np.min(np.minimum.reduce(distances)))


def _tail(u: LatticeField, centre: int, block_side: int) -> float:
    values = np.abs(u)
    total = float(values.sum())
    if total == 0.0:
        return 0.0
    side = u.shape[0]
    offset = (np.arange(side) - centre + side // 2) % side - side // 2
    far_axis = np.abs(offset) > 0.375 * block_side
    far = far_axis[:, None] | far_axis[None, :]
    return float(values[far].sum()) / total


def build_schedule(
    f: LatticeField, dec: CovarianceDecomposition, s: float, gamma: float
) -> ExternalFieldSchedule:
    """Split ``γf + C(s,m²)(1 + sγΔ)f`` into per-scale shifts.

    ``u_{j_f} = γf + Γ_{≤j_f} g``, ``u_j = Γ_j g`` for ``j_f < j < N`` and
    ``u_N = Γ_N^Λ g`` with ``g = f + sγΔf``. The support of ``f`` is first
    moved to :func:`hierarchy_centre`.

    Args:
        f: Mean-zero, compactly supported field.
        dec: Decomposition of ``C(s, m²)``.
        s: Gradient coupling used to build ``dec``.
        gamma: ``γ`` used to build ``dec``.

    Returns:
        ExternalFieldSchedule: The schedule with its diagnostics.

    Raises:
        ScheduleError: If ``Σf ≠ 0`` or ``j_f >= N``.
    """
    lattice = dec.cs.lattice
    L, N = lattice.L, lattice.N
    scale = max(1.0, float(np.abs(f).sum()))
    if abs(float(f.sum())) > MEAN_ZERO_TOLERANCE * scale:
        raise ScheduleError(f"Σf = {float(f.sum()):.3g} is not zero", "mean-zero")
    j_f = smoothness_scale(f, L)
    if j_f >= N:
        raise ScheduleError(
            f"Smoothness scale {j_f} must be below N = {N}; enlarge the torus",
            "j_f-below-N",
        )

    centre = hierarchy_centre(L, N)
    (start1, len1), (start2, len2) = support_extent(f)
    shift1 = centre - (start1 + (len1 - 1) // 2) if len1 else 0
    shift2 = centre - (start2 + (len2 - 1) // 2) if len2 else 0
    centred = np.roll(f, shift=(shift1, shift2), axis=(0, 1))

    g = centred + s * gamma * laplacian_nn(centred)
    u: dict[int, LatticeField] = {j_f: gamma * centred + dec.partial_sum(j_f).apply(g)}
    for j in range(j_f + 1, N + 1):
        u[j] = dec.gamma(j).apply(g)

    translation = gamma * centred + dec.cs.apply(g)
    completeness = float(np.max(np.abs(translation - sum(u.values()))))
    kappa = RegulatorParams.default(L).kappa
    margins = {j: block_margin(u[j], centre, L**j) for j in range(j_f, N)}
    tails = {j: _tail(u[j], centre, L**j) for j in range(j_f, N)}
    M_u = max(kappa * norm_C2j(u[j], j, L) for j in u)

    schedule = ExternalFieldSchedule(
        f=centred,
        j_f=j_f,
        u=u,
        s=s,
        gamma=gamma,
        massless=dec.divergent,
        L=L,
        N=N,
        centre=centre,
        margins=margins,
        tails=tails,
        M_u=M_u,
        completeness=completeness,
    )
    log.debug(
        "Schedule on side %d: j_f=%d, completeness %.3g, (A_u) %s",
        lattice.side,
        j_f,
        completeness,
        schedule.a_u_valid,
    )
    return schedule


@dataclass(frozen=True)
class ScheduleBounds:
    """Ratios ``ρ_j = ‖u_j‖_{C²_j} / (L^{2j_f} ‖f‖_{C²_{j_f}})``, ``j_f <= j <= N``."""

    ratios: dict[int, float]
    max_ratio: float
    argmax: int
    slope: float


def check_schedule_bounds(sched: ExternalFieldSchedule) -> ScheduleBounds:
    """Measure the scale-by-scale size of a schedule against its test function.

    ``slope`` is the least-squares slope of ``log ρ_j`` against ``j`` over the
    positive ratios, and 0 when fewer than two are positive.
    """
    L, j_f = sched.L, sched.j_f
    denominator = float(L) ** (2 * j_f) * norm_C2j(sched.f, j_f, L)
    ratios: dict[int, float] = {}
    for j in range(j_f, sched.N + 1):
        norm = norm_C2j(sched.field(j), j, L)
        ratios[j] = norm / denominator if denominator > 0 else 0.0

    argmax = max(ratios, key=lambda j: ratios[j])
    positive = [(j, r) for j, r in ratios.items() if r > 0]
    slope = 0.0
    if len(positive) >= 2:
        js, rs = zip(*positive, strict=True)
        slope = float(np.polyfit(np.array(js, dtype=float), np.log(rs), 1)[0])
    return ScheduleBounds(ratios, ratios[argmax], argmax, slope)


def schedule_dump(sched: ExternalFieldSchedule) -> list[dict[str, float | int]]:
    """Per-scale summary rows of a schedule for CSV output."""
    bounds = check_schedule_bounds(sched)
    rows: list[dict[str, float | int]] = []
    for j in range(sched.j_f, sched.N + 1):
        u = sched.field(j)
        rows.append(
            {
                "j": j,
                "sup": float(np.abs(u).max()),
                "norm_C2j": norm_C2j(u, j, sched.L),
                "rho": bounds.ratios[j],
                "margin": sched.margins.get(j, -1),
                "tail": sched.tails.get(j, 0.0),
            }
        )
    return rows


@dataclass(frozen=True)
class CtildeRow:
    """One ``ε`` of a continuum-limit sweep; ``j_f`` is capped at ``N``."""

    eps: float
    j_f: int
    quadform: float


@dataclass(frozen=True)
class CtildeLimit:
    """``(f_ε, C̃ f_ε)`` along an ``ε`` sweep with its extrapolated limit.

    Attributes:
        rows: Per-``ε`` values, largest ``ε`` first.
        limit: Richardson extrapolation assuming ``O(ε²)`` corrections.
        error: Difference of the last two extrapolations, or of the last value
            and the limit when only two levels exist.
        target: ``(v_J² + s)^-1 (f, (-Δ_{R²})^-1 f)``.
        quadrature: The continuum form with its quadrature error.
        converging: False if successive differences do not shrink.
    """

    rows: tuple[CtildeRow, ...]
    limit: float
    error: float
    target: float
    quadrature: QuadratureResult
    converging: bool

    @property
    def ratio(self) -> float:
        """``limit / target``."""
        return self.limit / self.target if self.target else math.nan


def _richardson(fine: float, coarse: float, r: float) -> float:
    return (r * r * fine - coarse) / (r * r - 1.0)


def reported_scale(f: LatticeField, lattice: TorusLattice) -> int:
    """:func:`smoothness_scale`, reporting ``N`` for supports too wide for a block."""
    try:
        return smoothness_scale(f, lattice.L)
    except ScheduleError:
        return lattice.N


def quadform_Ctilde_limit(
    f: SmoothTestFunction,
    eps_sweep: list[float],
    J: StepDistribution,
    lattice: TorusLattice,
    s: float,
    gamma: float,
) -> CtildeLimit:
    """Extrapolate ``(f_ε, C̃(s, m² → 0) f_ε)`` as ``ε → 0`` on a fixed torus.

    The massless limit is the zero-mode-excluded covariance.

    Raises:
        ScheduleError: If fewer than two ``ε`` are given.
    """
    eps_values = sorted(set(eps_sweep), reverse=True)
    if len(eps_values) < 2:
        raise ScheduleError("The ε sweep needs at least two values", "sweep-length")

    ctilde = covariance_Ctilde(J, lattice, s, 0.0, gamma)
    rows: list[CtildeRow] = []
    for eps in eps_values:
        feps = build_feps(f, eps, lattice)
        j_f = reported_scale(feps, lattice)
        rows.append(CtildeRow(eps, j_f, quadratic_form(ctilde, feps)))
        log.debug("ε=%g: (f_ε, C̃ f_ε) = %.12g", eps, rows[-1].quadform)

    extrapolations = [
        _richardson(b.quadform, a.quadform, a.eps / b.eps)
        for a, b in zip(rows, rows[1:])
    ]
    limit = extrapolations[-1]
    if len(extrapolations) >= 2:
        error = abs(extrapolations[-1] - extrapolations[-2])
    else:
        error = abs(rows[-1].quadform - limit)

    diffs = [abs(b.quadform - a.quadform) for a, b in zip(rows, rows[1:])]
    converging = all(d2 <= d1 for d1, d2 in zip(diffs, diffs[1:]))
    if not converging:
        log.warning("(f_ε, C̃ f_ε) sweep is not converging: differences %s", diffs)

    quadrature = continuum_green_form(f)
    target = quadrature.value / (v_J_squared(J) + s)
    return CtildeLimit(tuple(rows), limit, error, target, quadrature, converging)


def dipole(lattice: TorusLattice, charge: float = 1.0) -> LatticeField:
    """``charge · (δ_{e_1} - δ_0)``."""
    return charge * (lattice.delta((1, 0)) - lattice.delta((0, 0)))
