"""Blocks, polymers and their geometry at every scale."""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Iterable, Iterator
from dataclasses import dataclass
from enum import Enum
from functools import cached_property, lru_cache

import numpy as np

from multigauss.errors import BudgetExceededError, LatticeError
from multigauss.lattice import NEAREST_NEIGHBOURS, SiteMask, TorusLattice

log: logging.Logger = logging.getLogger("multigauss.polymers")

ENUMERATION_BUDGET: int = 16
SMALL_SET_SIZE: int = 4


class Adjacency(str, Enum):
    """Block adjacency used for connectivity."""

    LINF = "linf"
    L1 = "l1"


@dataclass(frozen=True)
class BlockLattice:
    """Partition of the torus into squares of side ``block_side``.

    Integer scales use ``block_side = L**j``; fractional scales of the
    subdecomposition use powers of ``ℓ = L**(1/M)``.
    """

    lattice: TorusLattice
    block_side: int
    adjacency: Adjacency = Adjacency.LINF

    def __post_init__(self) -> None:
        """Validate that blocks tile the torus."""
        if self.block_side < 1 or self.lattice.side % self.block_side:
            raise LatticeError(
                f"Block side {self.block_side} does not divide torus side "
                f"{self.lattice.side}",
                "block-tiling",
            )

    @classmethod
    def at_scale(
        cls, lattice: TorusLattice, j: int, adjacency: Adjacency = Adjacency.LINF
    ) -> BlockLattice:
        """Blocks of side ``L**j``, ``0 <= j <= N``."""
        if not 0 <= j <= lattice.N:
            raise LatticeError(f"Scale {j} outside [0, {lattice.N}]", "scale-range")
        return cls(lattice, lattice.L**j, adjacency)

    @property
    def scale(self) -> float:
        """``log_L`` of the block side."""
        return math.log(self.block_side) / math.log(self.lattice.L)

    @property
    def per_axis(self) -> int:
        """Blocks along one axis."""
        return self.lattice.side // self.block_side

    @property
    def n_blocks(self) -> int:
        """Total block count ``L^{2(N-j)}``."""
        return self.per_axis**2

    @cached_property
    def block_index(self) -> np.ndarray:
        """Array mapping each site to its block id."""
        k = np.arange(self.lattice.side) // self.block_side
        return k[:, None] * self.per_axis + k[None, :]

    def block_of(self, site: tuple[int, int]) -> int:
        """Id of the block containing ``site``."""
        x1, x2 = self.lattice.wrap(site)
        return (x1 // self.block_side) * self.per_axis + x2 // self.block_side

    @property
    def origin_block(self) -> int:
        """Id of ``B_0``, the block containing the origin."""
        return self.block_of(self.lattice.origin)

    def coords(self, block: int) -> tuple[int, int]:
        """Block-grid coordinates of a block id."""
        return divmod(block, self.per_axis)

    @lru_cache(maxsize=None)  # noqa: B019
    def neighbours(self, block: int) -> frozenset[int]:
        """Blocks adjacent to ``block`` (itself excluded)."""
        b1, b2 = self.coords(block)
        n = self.per_axis
        if self.adjacency is Adjacency.LINF:
            steps = [(a, b) for a in (-1, 0, 1) for b in (-1, 0, 1) if (a, b) != (0, 0)]
        else:
            steps = list(NEAREST_NEIGHBOURS)
        found = {((b1 + a) % n) * n + (b2 + b) % n for a, b in steps}
        found.discard(block)
        return frozenset(found)

    @lru_cache(maxsize=None)  # noqa: B019
    def block_mask(self, block: int) -> SiteMask:
        """Site mask of a single block."""
        mask = self.block_index == block
        mask.setflags(write=False)
        return mask

    def polymer(self, blocks: Iterable[int]) -> Polymer:
        """Polymer made of the given block ids."""
        return Polymer(self, tuple(blocks))

    def empty(self) -> Polymer:
        """The empty polymer."""
        return Polymer(self, ())

    def whole(self) -> Polymer:
        """The polymer covering the torus."""
        return Polymer(self, tuple(range(self.n_blocks)))

    def finer(self, factor: int) -> BlockLattice:
        """Block lattice with blocks ``factor`` times smaller."""
        return BlockLattice(self.lattice, self.block_side // factor, self.adjacency)

    def coarser(self, factor: int | None = None) -> BlockLattice:
        """Block lattice with blocks ``factor`` (default ``L``) times larger."""
        return BlockLattice(
            self.lattice, self.block_side * (factor or self.lattice.L), self.adjacency
        )


@dataclass(frozen=True)
class Polymer:
    """Union of blocks of one block lattice, stored as sorted block ids."""

    geometry: BlockLattice
    blocks: tuple[int, ...]

    def __post_init__(self) -> None:
        """Canonicalise the block ids."""
        canonical = tuple(sorted(set(self.blocks)))
        if canonical and (canonical[0] < 0 or canonical[-1] >= self.geometry.n_blocks):
            raise LatticeError("Block id out of range", "block-id")
        object.__setattr__(self, "blocks", canonical)

    def __len__(self) -> int:
        """Block count ``|X|_j``."""
        return len(self.blocks)

    def __iter__(self) -> Iterator[int]:
        """Iterate over block ids."""
        return iter(self.blocks)

    def __contains__(self, block: object) -> bool:
        """Block membership."""
        return block in self.blocks

    def __bool__(self) -> bool:
        """False for the empty polymer."""
        return bool(self.blocks)

    def _check(self, other: Polymer) -> None:
        if other.geometry != self.geometry:
            raise LatticeError(
                "Polymers live on different block lattices", "same-scale"
            )

    def union(self, other: Polymer) -> Polymer:
        """Block-wise union."""
        self._check(other)
        return Polymer(self.geometry, self.blocks + other.blocks)

    def intersection(self, other: Polymer) -> Polymer:
        """Block-wise intersection."""
        self._check(other)
        return Polymer(self.geometry, tuple(set(self.blocks) & set(other.blocks)))

    def difference(self, other: Polymer) -> Polymer:
        """Block-wise difference."""
        self._check(other)
        return Polymer(self.geometry, tuple(set(self.blocks) - set(other.blocks)))

    def issubset(self, other: Polymer) -> bool:
        """Inclusion of block sets."""
        self._check(other)
        return set(self.blocks) <= set(other.blocks)

    def complement(self) -> Polymer:
        """Blocks of the torus not in this polymer."""
        return self.geometry.whole().difference(self)

    @cached_property
    def site_mask(self) -> SiteMask:
        """Sites covered by the polymer."""
        mask = np.isin(self.geometry.block_index, self.blocks)
        mask.setflags(write=False)
        return mask

    @property
    def n_sites(self) -> int:
        """Number of sites ``|X|``."""
        return len(self.blocks) * self.geometry.block_side**2

    def contains_site(self, site: tuple[int, int]) -> bool:
        """True if ``site`` lies in the polymer."""
        return self.geometry.block_of(site) in self.blocks

    @property
    def contains_origin(self) -> bool:
        """True if ``0 ∈ X``."""
        return self.geometry.origin_block in self.blocks

    def single_blocks(self) -> list[Polymer]:
        """The polymer split into single-block polymers."""
        return [Polymer(self.geometry, (b,)) for b in self.blocks]

    def to_json(self) -> list[int]:
        """Serialise as a block-id array."""
        return list(self.blocks)


def components(X: Polymer) -> list[Polymer]:
    """Maximal connected sub-polymers of ``X``, ordered by smallest block id."""
    remaining = set(X.blocks)
    found: list[Polymer] = []
    for seed in X.blocks:
        if seed not in remaining:
            continue
        remaining.discard(seed)
        stack, component = [seed], [seed]
        while stack:
            block = stack.pop()
            for nb in X.geometry.neighbours(block):
                if nb in remaining:
                    remaining.discard(nb)
                    stack.append(nb)
                    component.append(nb)
        found.append(Polymer(X.geometry, tuple(component)))
    return found


def is_connected(X: Polymer) -> bool:
    """True for a non-empty polymer with one component."""
    return len(components(X)) == 1


def is_small_set(X: Polymer) -> bool:
    """True iff ``X`` is connected and ``1 <= |X|_j <= 4``."""
    return 1 <= len(X) <= SMALL_SET_SIZE and is_connected(X)


def touches(X: Polymer, Y: Polymer) -> bool:
    """True if some block of ``X`` is adjacent to or shared with ``Y``."""
    X._check(Y)
    others = set(Y.blocks)
    return any(b in others or X.geometry.neighbours(b) & others for b in X.blocks)


def closure(X: Polymer, coarse: BlockLattice | None = None) -> Polymer:
    """Smallest polymer of the coarser lattice containing ``X``.

    Args:
        X: Polymer.
        coarse: Target block lattice; defaults to blocks ``L`` times larger.

    Returns:
        Polymer: The coarse blocks meeting ``X``.

    Raises:
        LatticeError: If the coarse blocks are not unions of fine blocks.
    """
    fine = X.geometry
    if coarse is None:
        if fine.block_side * fine.lattice.L > fine.lattice.side:
            raise LatticeError("Closure needs j < N", "scale-range")
        coarse = fine.coarser()
    if coarse.block_side % fine.block_side:
        raise LatticeError(
            "Coarse blocks must be unions of fine blocks", "block-nesting"
        )
    ratio = coarse.block_side // fine.block_side
    ids = set()
    for block in X.blocks:
        b1, b2 = fine.coords(block)
        ids.add((b1 // ratio) * coarse.per_axis + b2 // ratio)
    return Polymer(coarse, tuple(ids))


def refine(X: Polymer, fine: BlockLattice) -> Polymer:
    """The same site set expressed with the blocks of a finer lattice."""
    return Polymer(fine, tuple(np.unique(fine.block_index[X.site_mask]).tolist()))


@lru_cache(maxsize=4096)
def _small_sets_containing(
    geometry: BlockLattice, block: int
) -> tuple[frozenset[int], ...]:
    level: set[frozenset[int]] = {frozenset((block,))}
    found: set[frozenset[int]] = set(level)
    for _ in range(SMALL_SET_SIZE - 1):
        grown: set[frozenset[int]] = set()
        for animal in level:
            for member in animal:
                for nb in geometry.neighbours(member):
                    if nb not in animal:
                        grown.add(animal | {nb})
        found |= grown
        level = grown
    return tuple(sorted(found, key=lambda s: (len(s), sorted(s))))


def small_sets_containing(geometry: BlockLattice, block: int) -> list[Polymer]:
    """All small sets that contain ``block``."""
    sets = _small_sets_containing(geometry, block)
    return [Polymer(geometry, tuple(s)) for s in sets]


def small_sets(geometry: BlockLattice) -> list[Polymer]:
    """All small sets of a block lattice, each listed once."""
    seen: set[frozenset[int]] = set()
    for block in range(geometry.n_blocks):
        seen.update(_small_sets_containing(geometry, block))
    ordered = sorted(seen, key=lambda s: (len(s), sorted(s)))
    return [Polymer(geometry, tuple(s)) for s in ordered]


def small_set_neighbourhood(X: Polymer) -> Polymer:
    """``X*``: union of all small sets meeting ``X``."""
    blocks: set[int] = set()
    for block in X.blocks:
        for animal in _small_sets_containing(X.geometry, block):
            blocks |= animal
    return Polymer(X.geometry, tuple(blocks))


def block_star_mask(geometry: BlockLattice, block: int) -> SiteMask:
    """Site mask of ``B*`` for a single block."""
    return small_set_neighbourhood(Polymer(geometry, (block,))).site_mask


def l1_neighbourhood(S: SiteMask, k: int) -> SiteMask:
    """``N_k(S)``: sites within ℓ¹ distance ``k`` of ``S``, with wrap."""
    out = np.array(S, dtype=bool)
    for _ in range(k):
        grown = out.copy()
        for step in NEAREST_NEIGHBOURS:
            grown |= np.roll(out, shift=step, axis=(0, 1))
        out = grown
    return out


def boundary(X: Polymer) -> SiteMask:
    """Inner ℓ¹ vertex boundary: sites of ``X`` with a neighbour outside ``X``."""
    mask = X.site_mask
    interior = mask.copy()
    for step in NEAREST_NEIGHBOURS:
        interior &= np.roll(mask, shift=step, axis=(0, 1))
    return mask & ~interior


def _guard(count: int) -> None:
    if count > ENUMERATION_BUDGET:
        raise BudgetExceededError(
            f"Enumerating subsets of {count} blocks exceeds the budget of "
            f"{ENUMERATION_BUDGET}",
            count,
            ENUMERATION_BUDGET,
        )


def subpolymers(X: Polymer) -> Iterator[Polymer]:
    """All sub-polymers of ``X`` (``∅`` and ``X`` included), by size then ids.

    Raises:
        BudgetExceededError: If ``X`` has more than 16 blocks.
    """
    _guard(len(X))
    for size in range(len(X) + 1):
        for subset in itertools.combinations(X.blocks, size):
            yield Polymer(X.geometry, subset)


def all_polymers(geometry: BlockLattice) -> Iterator[Polymer]:
    """Every polymer ``𝓟_j`` of the block lattice.

    Raises:
        BudgetExceededError: If the lattice has more than 16 blocks.
    """
    _guard(geometry.n_blocks)
    return subpolymers(geometry.whole())


def connected_polymers(geometry: BlockLattice) -> Iterator[Polymer]:
    """Every non-empty connected polymer."""
    return (X for X in all_polymers(geometry) if X and is_connected(X))
