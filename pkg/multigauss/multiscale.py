"""Multiscale splitting of ``C(s, m²)`` into per-scale covariances.

The pieces come from a smooth partition of unity on dyadic annuli in ``|p|``:
``Γ̂_j = Ĉ_s χ_j`` with ``χ_j = H_{j-1} - H_j`` for ``j < N`` and ``χ_N`` the
remainder, where ``H_r`` is a C^∞ low-pass filter of radius ``π L^{-r}``.
Telescoping is exact by construction; finite range is only approximate and is
measured by :meth:`CovarianceDecomposition.range_profile`.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import reduce

import numpy as np
import numpy.typing as npt

from multigauss.errors import DecompositionError
from multigauss.lattice import LatticeField
from multigauss.spectral import (
    PSD_TOLERANCE,
    DiagonalOperator,
    FourierMultiplier,
    ZeroMode,
)

log: logging.Logger = logging.getLogger("multigauss.multiscale")


def smooth_step(x: npt.NDArray[np.float64]) -> npt.NDArray[np.float64]:
    """C^∞ transition: 0 for ``x <= 0``, 1 for ``x >= 1``, from ``exp(-1/x)``."""
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(x > 0, np.exp(-1.0 / np.where(x > 0, x, 1.0)), 0.0)
        b = np.where(x < 1, np.exp(-1.0 / np.where(x < 1, 1.0 - x, 1.0)), 0.0)
    return a / (a + b)


def low_pass(
    abs_p: npt.NDArray[np.float64], radius: float, width: float
) -> npt.NDArray[np.float64]:
    """Filter equal to 1 for ``|p| <= radius`` and 0 for ``|p| >= radius(1+width)``."""
    if math.isinf(radius):
        return np.ones_like(abs_p)
    return 1.0 - smooth_step((abs_p / radius - 1.0) / width)


@dataclass(frozen=True)
class CovarianceDecomposition:
    """Per-scale covariances ``Γ_1, …, Γ_{N-1}, Γ_N^Λ`` and zero-mode part.

    Attributes:
        cs: The decomposed covariance ``C(s, m²)``.
        gammas: ``Γ_1 … Γ_N`` (the last one is ``Γ_N^Λ``).
        t_N: Zero-mode coefficient; ``inf`` when the zero mode is excluded.
        width: Relative transition width of the partition.
    """

    cs: DiagonalOperator
    gammas: tuple[DiagonalOperator, ...]
    t_N: float
    width: float

    @property
    def L(self) -> int:
        """Block base."""
        return self.cs.lattice.L

    @property
    def N(self) -> int:
        """Number of scales."""
        return self.cs.lattice.N

    @property
    def divergent(self) -> bool:
        """True when ``t_N`` diverges (massless zero mode)."""
        return math.isinf(self.t_N)

    def gamma(self, j: int) -> DiagonalOperator:
        """``Γ_j`` for ``1 <= j <= N``."""
        if not 1 <= j <= self.N:
            raise DecompositionError(f"Scale {j} outside [1, {self.N}]", "scale-range")
        return self.gammas[j - 1]

    def partial_sum(self, j: int) -> DiagonalOperator:
        """``Γ_{≤j} = Γ_1 + … + Γ_j``."""
        if not 1 <= j <= self.N:
            raise DecompositionError(f"Scale {j} outside [1, {self.N}]", "scale-range")
        return reduce(DiagonalOperator.plus, self.gammas[:j])

    def zero_mode_projection(self, f: LatticeField) -> LatticeField:
        """``Q_N f``: the constant field equal to the mean of ``f``."""
        return np.full_like(f, f.mean())

    def reconstruction_residual(self) -> float:
        """``max_p |Σ_j Γ̂_j(p) + t_N 1_{p=0} - Ĉ_s(p)|`` over the retained modes."""
        total = sum(g.values for g in self.gammas)
        target = self.cs.values.copy()
        if not self.divergent:
            total = total.copy()
            total[0, 0] += self.t_N
        return float(np.max(np.abs(total - target)))

    def range_profile(self, j: int) -> float:
        """Share of ``Σ_x |Γ_j(0, x)|`` carried by ``|x|_∞ > L^j / 4``."""
        kernel = np.abs(self.gamma(j).kernel())
        x1, x2 = self.cs.lattice.centred_coordinates
        far = np.maximum(np.abs(x1), np.abs(x2)) > 0.25 * self.L**j
        total = float(kernel.sum())
        return float(kernel[far].sum()) / total if total > 0 else 0.0

    def subdecompose(self, j: int, M: int) -> list[DiagonalOperator]:
        """Split ``Γ_j`` into ``M`` psd pieces on fractional scales.

        Args:
            j: Scale of the piece to split, ``1 <= j <= N``.
            M: Number of pieces; ``L`` must be an exact ``M``-th power.

        Returns:
            list[DiagonalOperator]: ``Γ_{j-1, j-1+1/M}, …, Γ_{j-1/M, j}``.

        Raises:
            DecompositionError: If ``L`` is not an ``M``-th power or a piece is
                not psd.
        """
        if M < 1:
            raise DecompositionError("M must be at least 1", "M-positive")
        target = self.gamma(j)
        if M == 1:
            return [target]
        ell = fractional_base(self.L, M)
        abs_p = _abs_momenta(self.cs)
        c_values = self.cs.values
        pieces: list[DiagonalOperator] = []
        for k in range(1, M):
            outer = low_pass(abs_p, _radius(ell, M * (j - 1) + k - 1), self.width)
            inner = low_pass(abs_p, _radius(ell, M * (j - 1) + k), self.width)
            values = c_values * (outer - inner)
            pieces.append(
                DiagonalOperator(
                    FourierMultiplier(values, self.cs.lattice),
                    target.zero_mode,
                    f"Gamma_{j - 1}+{k}/{M}",
                )
            )
        remainder = target.multiplier.values - sum(p.multiplier.values for p in pieces)
        pieces.append(
            DiagonalOperator(
                FourierMultiplier(remainder, self.cs.lattice),
                target.zero_mode,
                f"Gamma_{j}-1/{M}",
            )
        )
        for piece in pieces:
            if piece.values.min() < -PSD_TOLERANCE:
                raise DecompositionError(
                    f"Subdecomposition piece {piece.name} is not psd", "psd"
                )
        return pieces


def fractional_base(L: int, M: int) -> int:
    """Integer ``ℓ`` with ``ℓ**M == L``.

    Raises:
        DecompositionError: If no such integer exists.
    """
    ell = round(L ** (1.0 / M))
    if ell < 2 or ell**M != L:
        raise DecompositionError(f"L = {L} is not an exact {M}-th power", "L-power")
    return int(ell)


def _radius(base: int, exponent: int) -> float:
    # H_0 is identically one so the first scale absorbs the lattice corners.
    return math.inf if exponent == 0 else math.pi * float(base) ** (-exponent)


def _abs_momenta(op: DiagonalOperator) -> npt.NDArray[np.float64]:
    p1, p2 = op.lattice.momenta
    return np.sqrt(p1**2 + p2**2)


def decompose(cs: DiagonalOperator, width: float = 1.0) -> CovarianceDecomposition:
    """Split ``C(s, m²)`` into ``Γ_1 … Γ_{N-1}, Γ_N^Λ`` and ``t_N Q_N``.

    ``Γ̂_N^Λ(0)`` is the continuous extension of ``Γ̂_N`` from the lowest
    nonzero momentum, capped by ``Ĉ_s(0)``; ``t_N`` takes the rest of the zero
    mode and is infinite when the zero mode is excluded.

    Args:
        cs: Covariance to decompose; its torus fixes ``L`` and ``N``.
        width: Relative transition width of the partition.

    Returns:
        CovarianceDecomposition: The decomposition.

    Raises:
        DecompositionError: If ``cs`` or a piece is not psd.
    """
    if not cs.is_psd:
        raise DecompositionError("Covariance to decompose is not psd", "psd")
    if width <= 0:
        raise DecompositionError("Transition width must be positive", "width-positive")

    lattice = cs.lattice
    L, N = lattice.L, lattice.N
    abs_p = _abs_momenta(cs)
    c_values = cs.multiplier.values.copy()
    if cs.zero_mode is ZeroMode.EXCLUDED:
        c_values[0, 0] = 0.0

    pieces: list[npt.NDArray[np.float64]] = []
    chis: list[npt.NDArray[np.float64]] = []
    for j in range(1, N):
        outer = low_pass(abs_p, _radius(L, j - 1), width)
        chi = outer - low_pass(abs_p, _radius(L, j), width)
        chis.append(chi)
        pieces.append(c_values * chi)
    chi_last = 1.0 - sum(chis) if chis else np.ones_like(abs_p)
    last = c_values * chi_last

    if cs.zero_mode is ZeroMode.FINITE:
        # Zero mode of the last piece extended from the lowest nonzero shell.
        anchor = min(float(last[1, 0]), float(c_values[0, 0]))
        last[0, 0] = anchor
        t_N = float(c_values[0, 0]) - anchor
    else:
        last[0, 0] = 0.0
        t_N = math.inf
    pieces.append(last)

    gammas = tuple(
        DiagonalOperator(FourierMultiplier(values, lattice), cs.zero_mode, f"Gamma_{j}")
        for j, values in enumerate(pieces, start=1)
    )
    for gamma in gammas:
        if gamma.values.min() < -PSD_TOLERANCE:
            raise DecompositionError(f"{gamma.name} is not psd", "psd")

    decomposition = CovarianceDecomposition(cs, gammas, t_N, width)
    log.debug(
        "Decomposed %s on side %d into %d scales, residual %.3g",
        cs.name,
        lattice.side,
        N,
        decomposition.reconstruction_residual(),
    )
    return decomposition


def sample_scale(
    gamma: DiagonalOperator, rng: np.random.Generator, n: int | None = None
) -> LatticeField:
    """Draw Gaussian fields with covariance ``gamma``.

    White noise is filtered by ``sqrt(Γ̂)`` in Fourier space; the result is
    real because the multiplier is even.

    Args:
        gamma: Psd diagonal operator.
        rng: Random stream owned by the caller.
        n: Number of samples; ``None`` draws a single field.

    Returns:
        LatticeField: One field, or an array of ``n`` fields.
    """
    shape = gamma.lattice.shape if n is None else (n, *gamma.lattice.shape)
    noise = rng.standard_normal(shape)
    root = np.sqrt(np.clip(gamma.values, 0.0, None))
    return np.fft.ifft2(root * np.fft.fft2(noise, axes=(-2, -1)), axes=(-2, -1)).real


def convolve_kernel(gamma: DiagonalOperator, f: LatticeField) -> LatticeField:
    """Circular convolution ``Γ ∗ f``."""
    return gamma.apply(f)
