"""Fourier diagonalisation of translation-invariant operators on the torus.

Transforms follow ``numpy.fft``: the forward transform is unnormalised with
``e^{-ip·x}`` and the inverse carries ``|Λ|^-1``. With this convention
``(f, A f) = |Λ|^-1 Σ_p Â(p) |f̂(p)|²`` and the kernel column ``A(·, 0)`` is the
inverse transform of the multiplier.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Protocol

import numpy as np
import numpy.typing as npt
from scipy import integrate

from multigauss.errors import BudgetExceededError, LatticeError, SpectralError
from multigauss.lattice import LatticeField, StepDistribution, TorusLattice, v_J_squared

log: logging.Logger = logging.getLogger("multigauss.spectral")

PSD_TOLERANCE: float = 1e-12
DENSE_MAX_SIDE: int = 16


class ZeroMode(str, Enum):
    """Treatment of the constant mode ``p = 0``."""

    FINITE = "finite"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class FourierMultiplier:
    """Real multiplier on the dual grid of a torus, in numpy FFT order."""

    values: npt.NDArray[np.float64]
    lattice: TorusLattice

    def is_even(self, tol: float = 1e-12) -> bool:
        """Check ``values(p) == values(-p)``."""
        flipped = np.roll(self.values[::-1, ::-1], shift=(1, 1), axis=(0, 1))
        return bool(np.allclose(self.values, flipped, rtol=0.0, atol=tol))

    def rows(self) -> list[tuple[float, float, float]]:
        """Flattened ``(p1, p2, value)`` rows for CSV export."""
        p1, p2 = self.lattice.momenta
        return [
            (float(a), float(b), float(v))
            for a, b, v in zip(p1.ravel(), p2.ravel(), self.values.ravel(), strict=True)
        ]


@dataclass(frozen=True)
class DiagonalOperator:
    """Translation-invariant operator given by its Fourier multiplier.

    Attributes:
        multiplier: Fourier multiplier; its ``p = 0`` entry is ignored when the
            zero mode is excluded.
        zero_mode: Whether the constant mode carries a finite value.
        name: Label used in logs and output headers.
        margin: Smallest value of the inverted symbol, when the construction
            involved an inversion.
    """

    multiplier: FourierMultiplier
    zero_mode: ZeroMode = ZeroMode.FINITE
    name: str = ""
    margin: float | None = None

    @property
    def lattice(self) -> TorusLattice:
        """Torus the operator acts on."""
        return self.multiplier.lattice

    @property
    def values(self) -> npt.NDArray[np.float64]:
        """Multiplier with the excluded zero mode set to 0."""
        if self.zero_mode is ZeroMode.EXCLUDED:
            values = self.multiplier.values.copy()
            values[0, 0] = 0.0
            return values
        return self.multiplier.values

    @property
    def zero_mode_value(self) -> float:
        """Multiplier at ``p = 0`` (``inf`` when excluded)."""
        if self.zero_mode is ZeroMode.EXCLUDED:
            return float("inf")
        return float(self.multiplier.values[0, 0])

    @property
    def is_psd(self) -> bool:
        """True iff the multiplier is ``>= -1e-12`` on every retained mode."""
        return bool(self.values.min() >= -PSD_TOLERANCE)

    def apply(self, f: LatticeField) -> LatticeField:
        """Apply the operator to a real field."""
        return np.fft.ifft2(self.values * np.fft.fft2(f)).real

    def kernel(self) -> LatticeField:
        """Kernel column ``x -> A(x, 0)``."""
        return np.fft.ifft2(self.values).real

    def inverse(self) -> DiagonalOperator:
        """Operator with the reciprocal multiplier on the retained modes.

        Raises:
            SpectralError: If a retained mode of the multiplier vanishes.
        """
        values = self.values.copy()
        retained = np.ones_like(values, dtype=bool)
        if self.zero_mode is ZeroMode.EXCLUDED:
            retained[0, 0] = False
        if np.any(np.abs(values[retained]) < PSD_TOLERANCE):
            raise SpectralError(
                f"Operator {self.name!r} is not invertible", "invertible"
            )
        values[retained] = 1.0 / values[retained]
        return replace(
            self,
            multiplier=FourierMultiplier(values, self.lattice),
            name=f"inverse({self.name})",
            margin=None,
        )

    def plus(self, other: DiagonalOperator) -> DiagonalOperator:
        """Sum of two operators on the same torus."""
        zero_mode = (
            ZeroMode.EXCLUDED
            if ZeroMode.EXCLUDED in (self.zero_mode, other.zero_mode)
            else ZeroMode.FINITE
        )
        values = self.multiplier.values + other.multiplier.values
        return DiagonalOperator(
            FourierMultiplier(values, self.lattice),
            zero_mode,
            f"{self.name}+{other.name}",
        )

    def scaled(self, factor: float) -> DiagonalOperator:
        """The operator multiplied by a scalar."""
        return replace(
            self,
            multiplier=FourierMultiplier(factor * self.multiplier.values, self.lattice),
            margin=None,
        )

    def quadratic_form(self, f: LatticeField) -> float:
        """Return ``(f, A f)``; see :func:`quadratic_form`."""
        return quadratic_form(self, f)


def quadratic_form(A: DiagonalOperator, f: LatticeField) -> float:
    """Compute ``(f, A f)`` in Fourier space.

    Args:
        A: Diagonal operator.
        f: Field; must be mean-zero when the zero mode is excluded.

    Returns:
        float: The quadratic form.

    Raises:
        SpectralError: If the zero mode is excluded and ``Σ f != 0``.
    """
    if A.zero_mode is ZeroMode.EXCLUDED and abs(float(f.sum())) > 1e-10:
        raise SpectralError(
            "Quadratic form with excluded zero mode needs a mean-zero field",
            "mean-zero",
        )
    f_hat = np.fft.fft2(f)
    return float(np.sum(A.values * np.abs(f_hat) ** 2) / f.size)


def multiplier_nn(lattice: TorusLattice) -> FourierMultiplier:
    """Multiplier ``λ(p) = Σ_i 2(1 - cos p_i)`` of ``-Δ``."""
    p1, p2 = lattice.momenta
    symbol = 2.0 * (1.0 - np.cos(p1)) + 2.0 * (1.0 - np.cos(p2))
    return FourierMultiplier(symbol, lattice)


NN_RATIO_BRACKET: tuple[float, float] = (4.0 / np.pi**2, 1.0)


def multiplier_J(
    J: StepDistribution,
    lattice: TorusLattice,
    bracket: tuple[float, float] = NN_RATIO_BRACKET,
) -> FourierMultiplier:
    """Multiplier ``λ_J(p) = |J|^-1 Σ_{y∈J} (1 - cos p·y)`` of ``-Δ_J``.

    For the nearest-neighbour distribution the ratio ``λ_J(p) / (v_J² |p|²)``
    is asserted to lie in ``bracket`` on the nonzero dual grid.

    Raises:
        LatticeError: If the multiplier is negative somewhere.
        SpectralError: If the nearest-neighbour bracket is violated.
    """
    p1, p2 = lattice.momenta
    values = np.zeros(lattice.shape)
    for a, b in J.points:
        values += 1.0 - np.cos(a * p1 + b * p2)
    values /= J.size

    if values.min() < -PSD_TOLERANCE:
        raise LatticeError("Multiplier of -Δ_J is negative", "J-multiplier-nonnegative")

    if J == StepDistribution.nearest_neighbour() and lattice.side > 1:
        p_sq = p1**2 + p2**2
        nonzero = p_sq > 0
        ratio = values[nonzero] / (v_J_squared(J) * p_sq[nonzero])
        lo, hi = bracket
        if ratio.min() < lo - 1e-12 or ratio.max() > hi + 1e-12:
            raise SpectralError(
                f"λ_J/(v_J²|p|²) left the bracket [{lo}, {hi}]", "nn-bracket"
            )

    return FourierMultiplier(values, lattice)


def spectral_gap(J: StepDistribution, lattice: TorusLattice) -> float:
    """Smallest nonzero eigenvalue of ``-Δ_J``."""
    values = multiplier_J(J, lattice).values.copy()
    values[0, 0] = np.inf
    return float(values.min())


def inverse_laplacian_J(J: StepDistribution, lattice: TorusLattice) -> DiagonalOperator:
    """``(-Δ_J)^-1`` on mean-zero fields."""
    lam = multiplier_J(J, lattice)
    op = DiagonalOperator(lam, ZeroMode.EXCLUDED, "-Δ_J")
    return op.inverse()


def covariance_C(
    J: StepDistribution, lattice: TorusLattice, m2: float, gamma: float
) -> DiagonalOperator:
    """``C(m²) = (-Δ_J + m²)^-1 - γ``.

    ``m2 == 0`` realises the massless limit by excluding the zero mode. A
    non-psd result is logged and returned for study.

    Raises:
        SpectralError: If ``m2`` is negative.
    """
    if m2 < 0:
        raise SpectralError(f"m² must be nonnegative, got {m2}", "m2-nonnegative")
    lam = multiplier_J(J, lattice).values
    zero_mode = ZeroMode.FINITE if m2 > 0 else ZeroMode.EXCLUDED
    with np.errstate(divide="ignore"):
        values = 1.0 / (lam + m2) - gamma
    if zero_mode is ZeroMode.EXCLUDED:
        values[0, 0] = 0.0
    op = DiagonalOperator(FourierMultiplier(values, lattice), zero_mode, "C")
    if not op.is_psd:
        log.warning("C(m²=%g) with γ=%g is not positive semidefinite", m2, gamma)
    return op


def covariance_Cs(
    J: StepDistribution, lattice: TorusLattice, s: float, m2: float, gamma: float
) -> DiagonalOperator:
    """``C(s, m²) = (C(m²)^-1 - sΔ)^-1`` with ``Δ`` the unnormalised nn Laplacian.

    Raises:
        SpectralError: If ``Ĉ(p)^-1 + sλ(p)`` is not positive at some retained
            momentum; the message names the momentum.
    """
    c = covariance_C(J, lattice, m2, gamma)
    lam = multiplier_nn(lattice).values
    c_values = c.multiplier.values
    with np.errstate(divide="ignore"):
        safe = np.where(c_values == 0.0, 1.0, c_values)
        symbol = np.where(c_values == 0.0, np.inf, 1.0 / safe)
    symbol = symbol + s * lam

    retained = np.ones(lattice.shape, dtype=bool)
    if c.zero_mode is ZeroMode.EXCLUDED:
        retained[0, 0] = False
    bad = retained & ~(symbol > 0)
    if np.any(bad):
        k1, k2 = (int(i[0]) for i in np.nonzero(bad))
        p1, p2 = lattice.momenta
        raise SpectralError(
            f"C^-1 - sΔ is not positive at p = ({p1[k1, k2]:.6g}, {p2[k1, k2]:.6g}); "
            f"|s| = {abs(s):g} is too large",
            "Cs-positive",
        )

    values = np.where(retained, 1.0 / symbol, 0.0)
    margin = float(symbol[retained].min())
    return DiagonalOperator(
        FourierMultiplier(values, lattice), c.zero_mode, "Cs", margin
    )


def covariance_Ctilde(
    J: StepDistribution, lattice: TorusLattice, s: float, m2: float, gamma: float
) -> DiagonalOperator:
    """``C̃ = γ(1 + sγΔ) + (1 + sγΔ) C(s, m²) (1 + sγΔ)``."""
    cs = covariance_Cs(J, lattice, s, m2, gamma)
    factor = 1.0 - s * gamma * multiplier_nn(lattice).values
    values = gamma * factor + factor**2 * cs.multiplier.values
    if cs.zero_mode is ZeroMode.EXCLUDED:
        values[0, 0] = 0.0
    return DiagonalOperator(
        FourierMultiplier(values, lattice), cs.zero_mode, "Ctilde", cs.margin
    )


def dense_matrix(A: DiagonalOperator) -> npt.NDArray[np.float64]:
    """Dense site-by-site matrix of a diagonal operator (side at most 16).

    Raises:
        BudgetExceededError: If the torus is too large.
    """
    side = A.lattice.side
    if side > DENSE_MAX_SIDE:
        raise BudgetExceededError(
            f"Dense matrices are limited to side {DENSE_MAX_SIDE}", side, DENSE_MAX_SIDE
        )
    kernel = A.kernel()
    n = side * side
    matrix = np.empty((n, n))
    for idx in range(n):
        x1, x2 = divmod(idx, side)
        matrix[:, idx] = np.roll(kernel, shift=(x1, x2), axis=(0, 1)).ravel()
    return matrix


def dense_laplacian_J(
    J: StepDistribution, lattice: TorusLattice
) -> npt.NDArray[np.float64]:
    """Dense matrix of ``Δ_J`` assembled site by site (side at most 16).

    Raises:
        BudgetExceededError: If the torus is too large.
    """
    side = lattice.side
    if side > DENSE_MAX_SIDE:
        raise BudgetExceededError(
            f"Dense matrices are limited to side {DENSE_MAX_SIDE}", side, DENSE_MAX_SIDE
        )
    n = side * side
    matrix = np.zeros((n, n))
    for x1 in range(side):
        for x2 in range(side):
            row = x1 * side + x2
            for a, b in J.points:
                col = ((x1 + a) % side) * side + (x2 + b) % side
                matrix[row, col] += 1.0 / J.size
                matrix[row, row] -= 1.0 / J.size
    return matrix


class RadialBump(Protocol):
    """Smooth radial profile ``g`` with numerical support radius."""

    def radial_profile(self, r: float) -> float:
        """Return ``g`` at distance ``r`` from its centre."""
        ...

    @property
    def support_radius(self) -> float:
        """Radius beyond which ``|g|`` is negligible."""
        ...


@dataclass(frozen=True)
class QuadratureResult:
    """Value of a quadrature together with its error estimate."""

    value: float
    error: float


def continuum_green_form(f: RadialBump, tol: float = 1e-9) -> QuadratureResult:
    """Continuum ``(f, (-Δ_{R²})^-1 f)`` for ``f = ∂_i g`` with radial ``g``.

    In Fourier space the form is ``(2π)^-2 ∫ p_i² |ĝ|² / |p|² dp``; for radial
    ``g`` the angular average of ``p_i²/|p|²`` is ½, which reduces it to
    ``½ ‖g‖²_{L²} = π ∫_0^∞ g(r)² r dr``. The radial integral is done by
    adaptive quadrature.

    Args:
        f: Radial bump ``g`` whose derivative is the test function.
        tol: Largest admissible absolute error estimate.

    Returns:
        QuadratureResult: Value and error estimate.

    Raises:
        SpectralError: If the error estimate exceeds ``tol``.
    """

    def integrand(r: float) -> float:
        return f.radial_profile(r) ** 2 * r

    radius = float(f.support_radius)
    if radius <= 0:
        return QuadratureResult(0.0, 0.0)
    value, error = integrate.quad(integrand, 0.0, radius, epsabs=tol / 10, limit=200)
    value, error = np.pi * value, np.pi * error
    if error > tol:
        raise SpectralError(
            f"Quadrature error estimate {error:.3g} exceeds tolerance {tol:.3g}",
            "quadrature-tolerance",
        )
    return QuadratureResult(float(value), float(error))
