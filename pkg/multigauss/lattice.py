"""Torus geometry, step distributions and discrete differential operators.

Fields are plain ``numpy`` arrays of shape ``(side, side)``; axis 0 is the
first coordinate and axis 1 the second. Every shift wraps modulo ``side``.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import TypeAlias

import numpy as np
import numpy.typing as npt

from multigauss.errors import LatticeError

log: logging.Logger = logging.getLogger("multigauss.lattice")

LatticeField: TypeAlias = npt.NDArray[np.float64]
SiteMask: TypeAlias = npt.NDArray[np.bool_]

NEAREST_NEIGHBOURS: tuple[tuple[int, int], ...] = ((1, 0), (-1, 0), (0, 1), (0, -1))


@dataclass(frozen=True)
class TorusLattice:
    """Periodic two-dimensional grid of side ``L**N``.

    Attributes:
        L: Block base, at least 2.
        N: Number of scales, at least 1.
    """

    L: int
    N: int

    def __post_init__(self) -> None:
        """Validate the lattice parameters."""
        if self.L < 2:
            raise LatticeError(f"L must be at least 2, got {self.L}", "L-base")
        if self.N < 1:
            raise LatticeError(f"N must be at least 1, got {self.N}", "N-scales")

    @property
    def side(self) -> int:
        """Side length ``L**N``."""
        return int(self.L**self.N)

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape of a field on this torus."""
        return (self.side, self.side)

    @property
    def n_sites(self) -> int:
        """Number of sites ``|Λ|``."""
        return self.side * self.side

    @property
    def origin(self) -> tuple[int, int]:
        """The distinguished site 0."""
        return (0, 0)

    def zeros(self) -> LatticeField:
        """Return the zero field."""
        return np.zeros(self.shape)

    def delta(self, site: Sequence[int] = (0, 0)) -> LatticeField:
        """Return the indicator field of a single site."""
        field = self.zeros()
        field[self.wrap(site)] = 1.0
        return field

    def wrap(self, site: Sequence[int]) -> tuple[int, int]:
        """Canonical coordinates of a site in ``[0, side)**2``."""
        return (int(site[0]) % self.side, int(site[1]) % self.side)

    @cached_property
    def centred_coordinates(
        self,
    ) -> tuple[npt.NDArray[np.int64], npt.NDArray[np.int64]]:
        """Site coordinates folded into ``(-side/2, side/2]``."""
        k = np.arange(self.side)
        k = np.where(k > self.side // 2, k - self.side, k)
        x1, x2 = np.meshgrid(k, k, indexing="ij")
        return x1, x2

    @cached_property
    def momenta(self) -> tuple[npt.NDArray[np.float64], npt.NDArray[np.float64]]:
        """Dual-grid momenta folded into ``(-π, π]``, in numpy FFT order."""
        p = 2.0 * np.pi * np.fft.fftfreq(self.side)
        p = np.where(p < -np.pi + 1e-15, p + 2.0 * np.pi, p)
        p1, p2 = np.meshgrid(p, p, indexing="ij")
        return p1, p2


@dataclass(frozen=True)
class StepDistribution:
    """Finite symmetric set ``J`` of nonzero lattice steps."""

    points: tuple[tuple[int, int], ...]

    def __post_init__(self) -> None:
        """Validate symmetry, origin exclusion and nearest-neighbour content."""
        pts: set[tuple[int, int]] = set(self.points)

        if len(pts) != len(self.points):
            raise LatticeError("Step distribution lists a point twice", "J-distinct")

        if (0, 0) in pts:
            raise LatticeError(
                "Step distribution must not contain 0", "J-excludes-origin"
            )

        for a, b in pts:
            images = ((-a, b), (a, -b), (-b, a))
            if any(image not in pts for image in images):
                raise LatticeError(
                    f"Step distribution is not closed under reflections and "
                    f"rotations at {(a, b)}",
                    "J-symmetric",
                )

        if any(nn not in pts for nn in NEAREST_NEIGHBOURS):
            raise LatticeError(
                "Step distribution must contain the four nearest-neighbour vectors",
                "J-contains-nn",
            )

        object.__setattr__(self, "points", tuple(sorted(pts)))

    @classmethod
    def nearest_neighbour(cls) -> StepDistribution:
        """The four nearest-neighbour steps."""
        return cls(NEAREST_NEIGHBOURS)

    @classmethod
    def linf_ball(cls, radius: int = 1) -> StepDistribution:
        """All nonzero steps of ℓ∞ length at most ``radius``."""
        steps = range(-radius, radius + 1)
        pairs = itertools.product(steps, steps)
        return cls(tuple((a, b) for a, b in pairs if (a, b) != (0, 0)))

    @classmethod
    def from_descriptor(
        cls, descriptor: str | Iterable[Sequence[int]]
    ) -> StepDistribution:
        """Build a step distribution from a config descriptor.

        Args:
            descriptor: ``"nn"``, ``"linf1"`` or a list of integer pairs.

        Returns:
            StepDistribution: The validated distribution.

        Raises:
            LatticeError: If the descriptor is unknown or the points are invalid.
        """
        if descriptor == "nn":
            return cls.nearest_neighbour()
        if descriptor == "linf1":
            return cls.linf_ball(1)
        if isinstance(descriptor, str):
            raise LatticeError(
                f"Unknown step distribution '{descriptor}'", "J-descriptor"
            )
        try:
            points = tuple((int(p[0]), int(p[1])) for p in descriptor)
        except (TypeError, ValueError, IndexError) as e:
            raise LatticeError(
                "Step distribution must be a list of integer pairs", "J-descriptor"
            ) from e
        return cls(points)

    @property
    def size(self) -> int:
        """Point count ``|J|``."""
        return len(self.points)

    @property
    def range(self) -> int:
        """Largest ℓ∞ length of a step."""
        return max(max(abs(a), abs(b)) for a, b in self.points)

    def to_json(self) -> list[list[int]]:
        """Serialise as a list of integer pairs."""
        return [[a, b] for a, b in self.points]


def shift(f: LatticeField, step: Sequence[int]) -> LatticeField:
    """Return the field ``x -> f(x + step)``."""
    return np.roll(f, shift=(-int(step[0]), -int(step[1])), axis=(0, 1))


def inner(u: LatticeField, v: LatticeField) -> float:
    """Inner product ``(u, v) = Σ_x u(x) v(x)``."""
    return float(np.vdot(u, v).real)


def laplacian_J(
    J: StepDistribution, f: LatticeField, *, periodic_images: bool = False
) -> LatticeField:
    """Normalised range-J Laplacian ``|J|^-1 Σ_y (f(x+y) - f(x))``.

    Args:
        J: Step distribution.
        f: Field on the torus.
        periodic_images: Accept tori where steps wrap onto each other. The
            result is then the periodic restriction of the infinite-lattice
            operator.

    Returns:
        LatticeField: ``Δ_J f``.

    Raises:
        LatticeError: If the torus side is not larger than ``2 * range(J)``.
    """
    side = f.shape[0]
    if not periodic_images and side <= 2 * J.range:
        raise LatticeError(
            f"Torus side {side} must exceed twice the step range {J.range}",
            "torus-too-small",
        )
    total = np.zeros_like(f)
    for y in J.points:
        total += shift(f, y)
    return (total - J.size * f) / J.size


def laplacian_nn(f: LatticeField) -> LatticeField:
    """Unnormalised nearest-neighbour Laplacian ``Σ_μ (f(x+μ) - f(x))``.

    Raises:
        LatticeError: If the torus side is below 3.
    """
    if f.shape[0] < 3:
        raise LatticeError(
            "Nearest-neighbour Laplacian needs side >= 3", "torus-too-small"
        )
    return sum((shift(f, mu) for mu in NEAREST_NEIGHBOURS), start=-4.0 * f)


def v_J_squared(J: StepDistribution) -> float:
    """Return ``(2|J|)^-1 Σ_{x∈J} x_1**2``."""
    return sum(a * a for a, _ in J.points) / (2.0 * J.size)


# Direction labels: +1/-1 for ±e_1, +2/-2 for ±e_2.
DIRECTIONS: tuple[int, ...] = (1, -1, 2, -2)


def _unit(direction: int) -> tuple[int, int]:
    if direction not in DIRECTIONS:
        raise LatticeError(f"Unknown direction {direction}", "direction")
    sign = 1 if direction > 0 else -1
    return (sign, 0) if abs(direction) == 1 else (0, sign)


def grad(f: LatticeField, alpha: Sequence[int]) -> LatticeField:
    """Iterated difference ``∇^{e_{α_1}} ⋯ ∇^{e_{α_n}} f``.

    Args:
        f: Field on the torus.
        alpha: Non-empty sequence of direction labels from ``DIRECTIONS``.

    Returns:
        LatticeField: The iterated difference, with ``∇^e f(x) = f(x+e) - f(x)``.

    Raises:
        LatticeError: If ``alpha`` is empty or holds an unknown label.
    """
    if len(alpha) == 0:
        raise LatticeError("Multi-index must have length at least 1", "multi-index")
    out = f
    for direction in reversed(alpha):
        out = shift(out, _unit(direction)) - out
    return out


def grad_n_sitewise(f: LatticeField, n: int) -> LatticeField:
    """Field ``x -> max_α |∇^α f(x)|`` over direction tuples of length ``n``."""
    if n == 0:
        return np.abs(f)
    out = np.zeros_like(f)
    for alpha in itertools.product(DIRECTIONS, repeat=n):
        np.maximum(out, np.abs(grad(f, alpha)), out=out)
    return out


def grad_n_max(f: LatticeField, n: int, mask: SiteMask | None = None) -> float:
    """Max over sites (in ``mask``) and direction tuples of ``|∇^n f|``."""
    values = grad_n_sitewise(f, n)
    if mask is not None:
        return float(values[mask].max(initial=0.0))
    return float(values.max())


def norm_C2j(f: LatticeField, j: float, L: int, mask: SiteMask | None = None) -> float:
    """Scaled norm ``max_{n=0,1,2} L^{nj} ‖∇^n f‖_∞``.

    Args:
        f: Field on the torus.
        j: Scale; fractional scales are allowed.
        L: Block base.
        mask: Optional site set the sup is restricted to.

    Returns:
        float: The norm.

    Raises:
        LatticeError: If ``j`` lies outside ``[0, N]`` for the torus of side
            ``L^N``.
    """
    N = round(math.log(f.shape[0]) / math.log(L))
    if not 0 <= j <= N:
        raise LatticeError(f"Scale {j} outside [0, {N}]", "scale-range")
    return max(float(L) ** (n * j) * grad_n_max(f, n, mask) for n in range(3))
