"""Discrete Gaussian measure: Metropolis sampling, exact enumeration and checks.

Spins live on ``2πZ`` with site 0 pinned, or on ``2πβ^{-1/2}Z`` with a mass
term and no pin. The weight is ``e^{-energy}`` with
``energy = (2β)^-1 (σ, (-Δ_J + m²) σ)``; in the mass gauge the energy is taken
at ``β = 1`` because the spacing already carries ``β``.
"""

from __future__ import annotations

import itertools
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import numpy.typing as npt
from scipy import stats

from multigauss.config import get_config
from multigauss.errors import BudgetExceededError, SamplerError
from multigauss.extfield import (
    SmoothTestFunction,
    build_feps,
    dipole,
    reported_scale,
)
from multigauss.lattice import (
    LatticeField,
    SiteMask,
    StepDistribution,
    TorusLattice,
    v_J_squared,
)
from multigauss.multiscale import sample_scale
from multigauss.spectral import (
    QuadratureResult,
    continuum_green_form,
    covariance_Ctilde,
    dense_laplacian_J,
    inverse_laplacian_J,
    quadratic_form,
)

log: logging.Logger = logging.getLogger("multigauss.dgmc")

ENUMERATION_LOG_BUDGET: float = 24 * math.log(2)
CHUNK_LOG_SIZE: float = 16 * math.log(2)
TAIL_TOLERANCE: float = 1e-8
CHAIN_BLOCK: int = 8
N_BATCHES: int = 16
DEFAULT_P: float = 0.6
ACCEPTANCE_BAND: tuple[float, float] = (0.3, 0.6)
P_RANGE: tuple[float, float] = (0.05, 0.95)
TUNE_STEP: float = 0.05
MIN_ACCEPTANCE: float = 1e-3
SIGN_TEST_LEVEL: float = 0.05


class Gauge(str, Enum):
    """How the zero mode of the spin field is fixed."""

    PINNED = "pinned"
    MASS = "mass"

    def spacing(self, beta: float) -> float:
        """Distance between neighbouring spin values."""
        if self is Gauge.PINNED:
            return 2.0 * math.pi
        return 2.0 * math.pi / math.sqrt(beta)

    def energy_beta(self, beta: float) -> float:
        """Temperature entering :func:`energy` for this gauge."""
        return beta if self is Gauge.PINNED else 1.0


class SamplerMode(str, Enum):
    """Source of field samples for the scaling experiments."""

    MCMC = "mcmc"
    GAUSSIAN = "gaussian"


def energy(
    J: StepDistribution,
    beta: float,
    sigma: npt.NDArray[np.float64],
    m2: float = 0.0,
) -> float | npt.NDArray[np.float64]:
    """Edge-sum energy ``(4β|J|)^-1 Σ_x Σ_{y∈J} (σ_x - σ_{x+y})² + m²‖σ‖²/(2β)``.

    Every undirected edge is counted twice, which makes the sum equal to
    ``(2β)^-1 (σ, (-Δ_J + m²) σ)``. Leading axes of ``sigma`` are batch axes.
    """
    total = np.zeros(sigma.shape[:-2])
    for a, b in J.points:
        diff = sigma - np.roll(sigma, shift=(-a, -b), axis=(-2, -1))
        total = total + np.sum(diff * diff, axis=(-2, -1))
    result = total / (4.0 * beta * J.size)
    if m2:
        result = result + m2 * np.sum(sigma * sigma, axis=(-2, -1)) / (2.0 * beta)
    return float(result) if sigma.ndim == 2 else result


def _effective_steps(J: StepDistribution, side: int) -> list[tuple[int, int]]:
    # Steps that wrap onto the site itself never change the energy.
    return [(a, b) for a, b in J.points if (a % side, b % side) != (0, 0)]


def _delta_energy(
    J: StepDistribution,
    beta: float,
    m2: float,
    sigma: npt.NDArray[np.float64],
    D: npt.NDArray[np.float64],
) -> npt.NDArray[np.float64]:
    """Energy change at each site when that site alone moves by ``D``."""
    steps = _effective_steps(J, sigma.shape[-1])
    pull = np.zeros_like(sigma)
    for a, b in steps:
        pull += sigma - np.roll(sigma, shift=(-a, -b), axis=(-2, -1))
    out = (2.0 * D * pull + len(steps) * D * D) / (2.0 * beta * J.size)
    if m2:
        out = out + m2 * (2.0 * D * sigma + D * D) / (2.0 * beta)
    return out


def colour_classes(J: StepDistribution, side: int) -> list[SiteMask]:
    """Partition of the torus into sets with no two sites within range of ``J``.

    Sites are grouped by ``x mod c`` with ``c`` the smallest divisor of the
    side that is larger than the range.
    """
    c = next(c for c in range(min(J.range + 1, side), side + 1) if side % c == 0)
    x1, x2 = np.indices((side, side))
    return [(x1 % c == a) & (x2 % c == b) for a in range(c) for b in range(c)]


def transition_probability(
    J: StepDistribution,
    beta: float,
    sigma: npt.NDArray[np.float64],
    site: Sequence[int],
    step: int,
    *,
    p: float = DEFAULT_P,
    m2: float = 0.0,
    spacing: float = 2.0 * math.pi,
) -> float:
    """Probability that the update of ``site`` moves it by ``step · spacing``.

    Raises:
        SamplerError: If ``step`` is zero.
    """
    if step == 0:
        raise SamplerError("A transition needs a nonzero step", "nonzero-step")
    D = np.zeros_like(sigma)
    D[tuple(site)] = step * spacing
    dE = float(_delta_energy(J, beta, m2, sigma, D)[tuple(site)])
    proposal = 0.5 * p * (1.0 - p) ** (abs(step) - 1)
    return proposal * min(1.0, math.exp(-dE))


@dataclass(frozen=True)
class ChainDiagnostics:
    """Batch-means summary of a set of chains.

    Attributes:
        sweeps: Total sweeps per chain, burn-in included.
        burn_in: Sweeps discarded before recording.
        chains: Number of independent chains.
        acceptance: Fraction of accepted proposals over the recorded sweeps.
        means: Observable means.
        errors: Standard errors from batch means.
        tau: Integrated autocorrelation estimates, at least ½.
        jump_parameters: Geometric jump parameter of each chain block after
            burn-in.
    """

    sweeps: int
    burn_in: int
    chains: int
    acceptance: float
    means: dict[str, float]
    errors: dict[str, float]
    tau: dict[str, float]
    jump_parameters: tuple[float, ...] = ()


def batch_means(series: npt.NDArray[np.float64]) -> tuple[float, float, float]:
    """Mean, standard error and autocorrelation time of ``(samples, chains)`` data.

    Chain means serve as batches when there are several chains; a single
    chain is cut into 16 consecutive batches.

    Raises:
        SamplerError: If there are no samples.
    """
    series = np.asarray(series, dtype=float)
    if series.ndim == 1:
        series = series[:, None]
    n, chains = series.shape
    if n == 0:
        raise SamplerError("No recorded samples", "samples-nonempty")
    if chains >= 2:
        batches, per = series.mean(axis=0), n
    else:
        k = min(N_BATCHES, n)
        per = n // k
        batches = series[: per * k, 0].reshape(k, per).mean(axis=1)
    mean = float(series.mean())
    if batches.size < 2:
        return mean, 0.0, 0.5
    var_batches = float(batches.var(ddof=1))
    se = math.sqrt(var_batches / batches.size)
    var = float(series.var())
    tau = 0.5 if var == 0.0 else max(0.5, per * var_batches / (2.0 * var))
    return mean, se, tau


@dataclass(frozen=True)
class Chain:
    """Final states and recorded observables of a set of Metropolis chains.

    Attributes:
        heights: Integer heights, shape ``(chains, side, side)``.
        spacing: Spin value per unit height.
        gauge: Zero-mode treatment.
        observables: Per-sweep series, shape ``(recorded sweeps, chains)``.
        diagnostics: Batch-means summary.
    """

    heights: npt.NDArray[np.int64]
    spacing: float
    gauge: Gauge
    observables: dict[str, npt.NDArray[np.float64]]
    diagnostics: ChainDiagnostics

    @property
    def sigma(self) -> npt.NDArray[np.float64]:
        """Final spin configurations."""
        return self.spacing * self.heights

    def estimate(self, name: str) -> tuple[float, float]:
        """Mean and standard error of a recorded observable."""
        return self.diagnostics.means[name], self.diagnostics.errors[name]


def _record(
    sigma: npt.NDArray[np.float64], f: LatticeField | None
) -> dict[str, npt.NDArray[np.float64]]:
    half = max(1, sigma.shape[-1] // 2)
    out = {
        "sq": np.mean(sigma * sigma, axis=(-2, -1)),
        "tilt_1": np.mean(
            (np.roll(sigma, -1, axis=-2) - sigma)[:, :half, :half], axis=(-2, -1)
        ),
        "tilt_2": np.mean(
            (np.roll(sigma, -1, axis=-1) - sigma)[:, :half, :half], axis=(-2, -1)
        ),
    }
    if f is not None:
        out["fsigma"] = np.tensordot(sigma, f, axes=((-2, -1), (0, 1)))
    return out


def tune_jump_parameter(p: float, acceptance: float) -> float:
    """Nudge the jump parameter toward the 30-60% acceptance band.

    A larger ``p`` proposes shorter jumps, which are accepted more often.
    The result stays inside ``P_RANGE``.
    """
    low, high = ACCEPTANCE_BAND
    if acceptance < low:
        return min(P_RANGE[1], p + TUNE_STEP)
    if acceptance > high:
        return max(P_RANGE[0], p - TUNE_STEP)
    return p


def _run_block(
    J: StepDistribution,
    beta: float,
    m2: float,
    spacing: float,
    heights: npt.NDArray[np.int64],
    sweeps: int,
    burn_in: int,
    rng: np.random.Generator,
    p: float,
    pinned: bool,
    f: LatticeField | None,
    tune: bool,
) -> tuple[
    npt.NDArray[np.int64], dict[str, npt.NDArray[np.float64]], int, int, float
]:
    side = heights.shape[-1]
    classes = colour_classes(J, side)
    if pinned:
        classes = [mask & ~_origin_mask(side) for mask in classes]
    records: dict[str, list[npt.NDArray[np.float64]]] = {}
    accepted = proposed = 0

    for sweep in range(sweeps):
        sweep_accepted = sweep_proposed = 0
        for mask in classes:
            k = rng.geometric(p, size=heights.shape)
            sign = np.where(rng.random(heights.shape) < 0.5, -1, 1)
            d = np.where(mask, sign * k, 0)
            sigma = spacing * heights
            dE = _delta_energy(J, beta, m2, sigma, spacing * d)
            ratio = np.exp(-np.clip(dE, 0.0, None))
            accept = mask & (rng.random(heights.shape) < ratio)
            heights = heights + np.where(accept, d, 0)
            sweep_accepted += int(accept.sum())
            sweep_proposed += int(mask.sum()) * heights.shape[0]
        if sweep < burn_in:
            if tune and sweep_proposed:
                p = tune_jump_parameter(p, sweep_accepted / sweep_proposed)
            continue
        accepted += sweep_accepted
        proposed += sweep_proposed
        for name, value in _record(spacing * heights, f).items():
            records.setdefault(name, []).append(value)

    stacked = {name: np.stack(values) for name, values in records.items()}
    return heights, stacked, accepted, proposed, p


def _origin_mask(side: int) -> SiteMask:
    mask = np.zeros((side, side), dtype=bool)
    mask[0, 0] = True
    return mask


def mcmc_sample(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    sweeps: int,
    rng: np.random.Generator,
    *,
    m2: float = 0.0,
    chains: int = 16,
    gauge: Gauge = Gauge.PINNED,
    f: LatticeField | None = None,
    p: float = DEFAULT_P,
    burn_in: int | None = None,
    start: npt.NDArray[np.int64] | None = None,
    threads: int | None = None,
    tune: bool = False,
) -> Chain:
    """Run independent Metropolis chains for the Discrete Gaussian measure.

    A sweep visits the colour classes in turn; every site of a class proposes
    a jump of ``±k`` heights with ``k`` geometric, accepted with probability
    ``min(1, e^{-ΔE})``. Chains are split into blocks of eight with their own
    random streams, so results depend on the seed and not on the thread count.

    Args:
        J: Step distribution.
        beta: Inverse temperature, positive.
        lattice: Torus.
        sweeps: Sweeps per chain, burn-in included.
        rng: Parent random stream.
        m2: Mass; required positive in the mass gauge.
        chains: Number of chains.
        gauge: Pinned origin or mass-regularised spacing.
        f: Optional test function whose pairing ``(f, σ)`` is recorded.
        p: Parameter of the geometric jump length.
        burn_in: Discarded sweeps; defaults to a tenth of ``sweeps``.
        start: Initial heights; zero by default.
        threads: Worker threads; defaults to the runtime configuration.
        tune: Adjust ``p`` during burn-in toward the acceptance band; the
            recorded sweeps always use a fixed ``p``.

    Returns:
        Chain: Final states, per-sweep observables and diagnostics.

    Raises:
        SamplerError: If the measure is not normalisable or the run
            parameters are invalid.
    """
    if beta <= 0:
        raise SamplerError(f"β must be positive, got {beta}", "beta-positive")
    if gauge is Gauge.MASS and m2 <= 0:
        raise SamplerError(
            "m² = 0 without a pinned site leaves the zero mode non-normalisable",
            "normalisable",
        )
    if not 0 < p < 1:
        raise SamplerError(f"Jump parameter must lie in (0, 1), got {p}", "p-range")
    burn_in = sweeps // 10 if burn_in is None else burn_in
    if sweeps <= burn_in or chains < 1:
        raise SamplerError("Need at least one recorded sweep and one chain", "run-size")

    side = lattice.side
    if start is None:
        initial = np.zeros(lattice.shape, dtype=np.int64)
    else:
        initial = np.asarray(start)
    if gauge is Gauge.PINNED and initial[0, 0] != 0:
        raise SamplerError("Pinned gauge needs σ_0 = 0 at the start", "gauge-pinned")

    sizes = [min(CHAIN_BLOCK, chains - i) for i in range(0, chains, CHAIN_BLOCK)]
    streams = rng.spawn(len(sizes))
    spacing = gauge.spacing(beta)
    beta_e = gauge.energy_beta(beta)
    workers = threads or get_config().threads

    def run(args: tuple[int, np.random.Generator]) -> tuple:
        size, stream = args
        heights = np.broadcast_to(initial, (size, side, side)).astype(np.int64)
        return _run_block(
            J, beta_e, m2, spacing, heights, sweeps, burn_in, stream, p,
            gauge is Gauge.PINNED, f, tune,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        results = list(executor.map(run, zip(sizes, streams)))

    heights = np.concatenate([r[0] for r in results])
    observables = {
        name: np.concatenate([r[1][name] for r in results], axis=1)
        for name in results[0][1]
    }
    accepted = sum(r[2] for r in results)
    proposed = sum(r[3] for r in results)
    jump_parameters = tuple(r[4] for r in results)

    means: dict[str, float] = {}
    errors: dict[str, float] = {}
    tau: dict[str, float] = {}
    for name, series in observables.items():
        means[name], errors[name], tau[name] = batch_means(series)
    acceptance = accepted / proposed if proposed else 0.0
    diagnostics = ChainDiagnostics(
        sweeps, burn_in, chains, acceptance, means, errors, tau, jump_parameters
    )
    log.info(
        "Sampled %d chains x %d sweeps at β=%g on side %d, acceptance %.3f",
        chains,
        sweeps,
        beta,
        side,
        acceptance,
    )
    return Chain(heights, spacing, gauge, observables, diagnostics)


def check_mixing(chain: Chain, observable: str) -> None:
    """Require the chains to move and the burn-in to cover ``τ`` of ``observable``.

    Raises:
        SamplerError: If the acceptance is below ``MIN_ACCEPTANCE`` or the
            autocorrelation time exceeds the burn-in.
    """
    diagnostics = chain.diagnostics
    if diagnostics.acceptance < MIN_ACCEPTANCE:
        raise SamplerError(
            f"Acceptance {diagnostics.acceptance:.3g} is below {MIN_ACCEPTANCE:g}; "
            "β is outside the sampler's ergodic range",
            "ergodic",
        )
    tau = diagnostics.tau[observable]
    if tau > max(diagnostics.burn_in, 1):
        raise SamplerError(
            f"Autocorrelation time {tau:.3g} of {observable} exceeds the burn-in "
            f"of {diagnostics.burn_in} sweeps",
            "ergodic",
        )
    log.debug(
        "Mixing of %s: acceptance %.3f, τ %.3g", observable, diagnostics.acceptance, tau
    )


@dataclass(frozen=True)
class ExactResult:
    """Expectations of the pinned measure summed over a truncated spin range.

    Attributes:
        partition: ``Σ e^{-energy}`` over the enumerated states.
        mgf: ``⟨e^{(f,σ)}⟩``.
        second_moment: ``⟨(f,σ)²⟩``.
        mean: ``⟨(f,σ)⟩``.
        characteristic: ``⟨e^{i(f,σ)}⟩``, real by parity.
        boundary_weight: Probability of some height reaching ``±K``.
        truncated: True when ``boundary_weight`` exceeds the tolerance.
        states: Number of enumerated states.
        K: Height truncation.
    """

    partition: float
    mgf: float
    second_moment: float
    mean: float
    characteristic: float
    boundary_weight: float
    truncated: bool
    states: int
    K: int


def exact_enumerate(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    K: int,
    f: LatticeField | None = None,
    *,
    tail_tolerance: float = TAIL_TOLERANCE,
    threads: int | None = None,
) -> ExactResult:
    """Sum the pinned measure over ``σ ∈ (2π{-K..K})^{Λ∖{0}}``, ``σ_0 = 0``.

    The leading heights index chunks that are summed on worker threads and
    reduced in a fixed order. Wrapping steps on small tori are kept as
    periodic images.

    Raises:
        SamplerError: If ``K < 1`` or ``β <= 0``.
        BudgetExceededError: If ``(|Λ| - 1) log(2K + 1)`` exceeds ``24 log 2``.
    """
    if K < 1:
        raise SamplerError(f"Truncation must be at least 1, got {K}", "K-positive")
    if beta <= 0:
        raise SamplerError(f"β must be positive, got {beta}", "beta-positive")
    free = lattice.n_sites - 1
    base = 2 * K + 1
    if free * math.log(base) > ENUMERATION_LOG_BUDGET + 1e-12:
        raise BudgetExceededError(
            f"Enumerating {base}^{free} states exceeds the budget", base**free, 2**24
        )

    A = -dense_laplacian_J(J, lattice)[1:, 1:]
    f_free = (lattice.zeros() if f is None else f).ravel()[1:]
    rest = min(free, int(CHUNK_LOG_SIZE // math.log(base)))
    lead = free - rest
    grid = np.indices((base,) * rest).reshape(rest, -1).T - K
    spacing = 2.0 * math.pi

    def chunk(prefix: tuple[int, ...]) -> npt.NDArray[np.float64]:
        heights = np.empty((grid.shape[0], free), dtype=np.int64)
        heights[:, :lead] = prefix
        heights[:, lead:] = grid
        s = spacing * heights
        w = np.exp(-np.sum((s @ A) * s, axis=1) / (2.0 * beta))
        x = s @ f_free
        edge = np.max(np.abs(heights), axis=1) == K
        return np.array(
            [
                w.sum(),
                (w * np.exp(x)).sum(),
                (w * x * x).sum(),
                (w * x).sum(),
                (w * np.cos(x)).sum(),
                w[edge].sum(),
            ]
        )

    prefixes = list(itertools.product(range(-K, K + 1), repeat=lead))
    with ThreadPoolExecutor(max_workers=max(1, threads or get_config().threads)) as ex:
        parts = list(ex.map(chunk, prefixes))
    totals = np.zeros(6)
    for part in parts:
        totals += part

    Z = float(totals[0])
    boundary = float(totals[5]) / Z
    truncated = boundary > tail_tolerance
    if truncated:
        log.warning("Truncation K=%d leaves boundary weight %.3g", K, boundary)
    return ExactResult(
        partition=Z,
        mgf=float(totals[1]) / Z,
        second_moment=float(totals[2]) / Z,
        mean=float(totals[3]) / Z,
        characteristic=float(totals[4]) / Z,
        boundary_weight=boundary,
        truncated=truncated,
        states=base**free,
        K=K,
    )


@dataclass(frozen=True)
class MonotonicityReport:
    """``S_N(f) = ⟨e^{i(f,σ)}⟩`` on two nested tori."""

    side_small: int
    side_large: int
    s_small: float
    s_large: float

    @property
    def holds(self) -> bool:
        """``S`` on the small torus does not exceed ``S`` on the large one."""
        return self.s_small <= self.s_large + 1e-12


def check_monotonicity(
    J: StepDistribution,
    beta: float,
    L: int = 2,
    N: int = 1,
    charge: float = 0.3,
    K: int = 1,
) -> MonotonicityReport:
    """Compare ``S_N`` and ``S_{N+1}`` for the dipole ``charge (δ_{e_1} - δ_0)``."""
    small, large = TorusLattice(L, N), TorusLattice(L, N + 1)
    s_small = exact_enumerate(J, beta, small, K, dipole(small, charge)).characteristic
    s_large = exact_enumerate(J, beta, large, K, dipole(large, charge)).characteristic
    report = MonotonicityReport(small.side, large.side, s_small, s_large)
    if not report.holds:
        log.warning("S_%d = %.12g exceeds S_%d = %.12g", N, s_small, N + 1, s_large)
    return report


@dataclass(frozen=True)
class GinibreReport:
    """Observed moments against their Gaussian upper bounds.

    Attributes:
        mode: ``oracle`` or ``mcmc``.
        green: ``(f, (-Δ_J)^-1 f)``.
        mgf: ``⟨e^{(f,σ)}⟩``.
        mgf_bound: ``e^{(β/2)(f, (-Δ_J)^-1 f)}``.
        mgf_se: Standard error, zero in oracle mode.
        second_moment: ``⟨(f,σ)²⟩``.
        second_bound: ``β (f, (-Δ_J)^-1 f)``.
        second_se: Standard error, zero in oracle mode.
        monotonicity: Nested-torus comparison when requested.
    """

    mode: str
    green: float
    mgf: float
    mgf_bound: float
    mgf_se: float
    second_moment: float
    second_bound: float
    second_se: float
    monotonicity: MonotonicityReport | None = None

    @property
    def mgf_holds(self) -> bool:
        """Exponential bound, within three standard errors."""
        return self.mgf - 3.0 * self.mgf_se <= self.mgf_bound * (1.0 + 1e-12)

    @property
    def second_holds(self) -> bool:
        """Second-moment bound, within three standard errors."""
        lower = self.second_moment - 3.0 * self.second_se
        return lower <= self.second_bound * (1.0 + 1e-12)

    @property
    def holds(self) -> bool:
        """Every checked inequality holds."""
        nested = self.monotonicity is None or self.monotonicity.holds
        return self.mgf_holds and self.second_holds and nested

    @property
    def slack(self) -> tuple[float, float]:
        """Distance of each moment below its bound."""
        return self.mgf_bound - self.mgf, self.second_bound - self.second_moment


def check_ginibre(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    f: LatticeField,
    mode: str = "oracle",
    *,
    K: int = 2,
    rng: np.random.Generator | None = None,
    sweeps: int = 2000,
    chains: int = 32,
    monotone_charge: float | None = None,
) -> GinibreReport:
    """Check ``⟨e^{(f,σ)}⟩ <= e^{(β/2)G}`` and ``⟨(f,σ)²⟩ <= βG``.

    ``G = (f, (-Δ_J)^-1 f)`` and ``β`` enters through the covariance
    ``β(-Δ_J)^-1`` of the comparison Gaussian.

    Raises:
        SpectralError: If ``f`` is not mean-zero.
        SamplerError: If ``mode`` is unknown.
    """
    green = quadratic_form(inverse_laplacian_J(J, lattice), f)
    mgf_bound = math.exp(0.5 * beta * green)
    second_bound = beta * green

    if mode == "oracle":
        exact = exact_enumerate(J, beta, lattice, K, f)
        mgf, mgf_se = exact.mgf, 0.0
        second, second_se = exact.second_moment, 0.0
    elif mode == "mcmc":
        chain = mcmc_sample(
            J, beta, lattice, sweeps, rng or np.random.default_rng(), chains=chains, f=f
        )
        x = chain.observables["fsigma"]
        mgf, mgf_se, _ = batch_means(np.exp(x))
        second, second_se, _ = batch_means(x * x)
    else:
        raise SamplerError(f"Unknown Ginibre mode {mode!r}", "ginibre-mode")

    monotonicity = None
    if monotone_charge is not None:
        monotonicity = check_monotonicity(J, beta, charge=monotone_charge)

    report = GinibreReport(
        mode,
        green,
        mgf,
        mgf_bound,
        mgf_se,
        second,
        second_bound,
        second_se,
        monotonicity,
    )
    if not report.holds:
        log.warning("Ginibre check failed in %s mode: %s", mode, report)
    return report


@dataclass(frozen=True)
class TiltReport:
    """Mean gradient over the lower-left quarter box, per direction."""

    means: tuple[float, float]
    errors: tuple[float, float]

    @property
    def zero(self) -> tuple[bool, bool]:
        """Each direction is within three standard errors of zero."""
        return tuple(abs(m) <= 3.0 * e + 1e-12 for m, e in zip(self.means, self.errors))

    @property
    def symmetric(self) -> bool:
        """Both directions agree within their combined error."""
        gap = abs(self.means[0] - self.means[1])
        return gap <= 3.0 * math.hypot(*self.errors) + 1e-12


def check_zero_tilt(chain: Chain) -> TiltReport:
    """Average ``∇_{e_i} σ`` over the box ``[0, side/2)²`` and the chain.

    The full-torus average vanishes identically, so the box is what carries
    information about the tilt.
    """
    m1, e1 = chain.estimate("tilt_1")
    m2, e2 = chain.estimate("tilt_2")
    report = TiltReport((m1, m2), (e1, e2))
    if not all(report.zero):
        log.warning("Nonzero tilt: means %s, errors %s", report.means, report.errors)
    return report


def gaussian_control_sample(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    n: int,
    rng: np.random.Generator,
) -> npt.NDArray[np.float64]:
    """Exact draws of the Gaussian field with covariance ``β(-Δ_J)^-1``, mean zero."""
    return sample_scale(inverse_laplacian_J(J, lattice).scaled(beta), rng, n)


@dataclass(frozen=True)
class MGFEstimate:
    """``log⟨e^{a X}⟩`` from samples of ``X``.

    Attributes:
        amplitude: Factor ``a``.
        log_mgf: Estimate.
        se: Standard error from batch means.
        ess_fraction: Effective sample size of the weights over the sample count.
    """

    amplitude: float
    log_mgf: float
    se: float
    ess_fraction: float


def estimate_log_mgf(
    samples: npt.NDArray[np.float64],
    amplitude: float | None = None,
    min_ess_fraction: float | None = None,
) -> MGFEstimate:
    """Estimate ``log⟨e^{a X}⟩`` by direct reweighting.

    Without an explicit ``amplitude`` the factor is ``min(1, 1/std(X))`` so
    the exponent has variance at most one.

    Args:
        samples: ``(samples, chains)`` or flat array of ``X``.
        amplitude: Factor ``a``.
        min_ess_fraction: Smallest admissible effective sample fraction;
            defaults to the runtime configuration.

    Returns:
        MGFEstimate: Estimate and diagnostics.

    Raises:
        SamplerError: If the weights degenerate below the threshold.
    """
    x = np.asarray(samples, dtype=float)
    if amplitude is None:
        std = float(x.std())
        amplitude = 1.0 if std == 0.0 else min(1.0, 1.0 / std)
    threshold = (
        get_config().min_ess_fraction if min_ess_fraction is None else min_ess_fraction
    )

    ax = amplitude * x
    top = float(ax.max())
    w = np.exp(ax - top)
    ess = float(w.sum()) ** 2 / float((w * w).sum()) / w.size
    if ess < threshold:
        raise SamplerError(
            f"Effective sample fraction {ess:.3g} is below {threshold:g}; "
            "reduce the amplitude of f_ε",
            "ess",
        )
    mean, se, _ = batch_means(w)
    return MGFEstimate(amplitude, top + math.log(mean), se / mean, ess)


def _fsigma_samples(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    feps: LatticeField,
    mode: SamplerMode,
    sweeps: int,
    chains: int,
    rng: np.random.Generator,
    *,
    m2: float = 0.0,
) -> npt.NDArray[np.float64]:
    if mode is SamplerMode.GAUSSIAN:
        fields = gaussian_control_sample(J, beta, lattice, sweeps * chains, rng)
        return np.tensordot(fields, feps, axes=((-2, -1), (0, 1)))
    if m2 > 0:
        chain = mcmc_sample(
            J,
            beta,
            lattice,
            sweeps,
            rng,
            m2=m2,
            chains=chains,
            gauge=Gauge.MASS,
            f=feps,
            tune=True,
        )
        check_mixing(chain, "fsigma")
        # Spins on 2πβ^{-1/2}Z stand for σ/√β.
        return math.sqrt(beta) * chain.observables["fsigma"]
    chain = mcmc_sample(
        J, beta, lattice, sweeps, rng, chains=chains, f=feps, tune=True
    )
    check_mixing(chain, "fsigma")
    return chain.observables["fsigma"]


def _mesoscopic(eps: float, lattice: TorusLattice) -> None:
    if eps * lattice.side < 8:
        raise SamplerError(
            f"ε L^N = {eps * lattice.side:g} is below the mesoscopic window 8",
            "mesoscopic-window",
        )


@dataclass(frozen=True)
class ScalingRow:
    """One ``ε`` of the scaling-limit experiment."""

    eps: float
    j_f: int
    amplitude: float
    estimate: float
    se: float
    target: float
    lattice_target: float
    ess_fraction: float

    @property
    def ratio(self) -> float:
        """``estimate / target``."""
        return self.estimate / self.target if self.target else math.nan

    @property
    def statistical_error(self) -> float:
        """Standard error of :attr:`ratio`."""
        return self.se / self.target if self.target else math.nan

    @property
    def discretisation_error(self) -> float:
        """Relative gap between the lattice and the continuum prediction."""
        if not self.target:
            return math.nan
        return abs(self.target - self.lattice_target) / self.target

    @property
    def ratio_error(self) -> float:
        """Statistical and discretisation errors added in quadrature."""
        return math.hypot(self.statistical_error, self.discretisation_error)


@dataclass(frozen=True)
class ScalingLimitReport:
    """Per-``ε`` log-MGF estimates against the continuum prediction."""

    mode: SamplerMode
    rows: tuple[ScalingRow, ...]
    green: QuadratureResult


def scaling_limit_experiment(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    f: SmoothTestFunction,
    eps_sweep: Sequence[float],
    *,
    mode: SamplerMode = SamplerMode.MCMC,
    sweeps: int = 2000,
    chains: int = 32,
    rng: np.random.Generator | None = None,
    min_ess_fraction: float | None = None,
) -> ScalingLimitReport:
    """Estimate ``log⟨e^{a(f_ε,σ)}⟩`` along an ``ε`` sweep.

    The prediction is ``a² β/(2 v_J²) (f, (-Δ_{R²})^-1 f)`` with ``β`` in
    place of the effective temperature; the lattice target
    ``a² (β/2)(f_ε, (-Δ_J)^-1 f_ε)`` separates discretisation from
    statistics. ``mode = gaussian`` replaces the spins by the continuum
    Gaussian with the same covariance.

    Raises:
        SamplerError: If an ``ε`` leaves the mesoscopic window or the
            reweighting degenerates. Sampled chains must also pass
            :func:`check_mixing`.
    """
    rng = rng or np.random.default_rng()
    green = continuum_green_form(f)
    inverse = inverse_laplacian_J(J, lattice)
    rows: list[ScalingRow] = []
    for eps in sorted(set(eps_sweep), reverse=True):
        _mesoscopic(eps, lattice)
        feps = build_feps(f, eps, lattice)
        x = _fsigma_samples(J, beta, lattice, feps, mode, sweeps, chains, rng)
        est = estimate_log_mgf(x, min_ess_fraction=min_ess_fraction)
        a2 = est.amplitude**2
        rows.append(
            ScalingRow(
                eps=eps,
                j_f=reported_scale(feps, lattice),
                amplitude=est.amplitude,
                estimate=est.log_mgf,
                se=est.se,
                target=a2 * beta * green.value / (2.0 * v_J_squared(J)),
                lattice_target=0.5 * a2 * beta * quadratic_form(inverse, feps),
                ess_fraction=est.ess_fraction,
            )
        )
        log.info(
            "ε=%g: log-MGF %.6g ± %.2g, ratio %.4f",
            eps,
            est.log_mgf,
            est.se,
            rows[-1].ratio,
        )
    return ScalingLimitReport(mode, tuple(rows), green)


@dataclass(frozen=True)
class ZnRow:
    """One ``ε`` of the partition-ratio experiment."""

    eps: float
    j_f: int
    amplitude: float
    log_mgf: float
    gaussian_part: float
    se: float

    @property
    def value(self) -> float:
        """``log⟨e^{a(f_ε,σ)}⟩ - a² (β/2)(f_ε, C̃ f_ε)``."""
        return self.log_mgf - self.gaussian_part


@dataclass(frozen=True)
class ZnRatioReport:
    """Remainder after removing the Gaussian part, with its decay in ``j_f``.

    Attributes:
        rows: Per-``ε`` rows, largest ``ε`` first.
        decreases: Consecutive rows where ``|value|`` drops.
        pairs: Consecutive rows compared.
        p_value: One-sided sign-test p-value against no decay; nan without
            pairs.
    """

    rows: tuple[ZnRow, ...]
    decreases: int
    pairs: int
    p_value: float

    @property
    def decreasing(self) -> bool:
        """The sign test rejects "no decay" at the 5% level."""
        return self.pairs > 0 and self.p_value < SIGN_TEST_LEVEL


def sign_test_decreasing(rows: Sequence[ZnRow]) -> ZnRatioReport:
    """One-sided sign test that ``|value|`` decreases along the sweep.

    Rows are ordered by ``j_f`` and then by decreasing ``ε``; every
    consecutive pair is one Bernoulli trial, a success when ``|value|``
    drops.
    """
    ordered = sorted(rows, key=lambda r: (r.j_f, -r.eps))
    magnitudes = np.abs([r.value for r in ordered])
    pairs = max(len(ordered) - 1, 0)
    decreases = int(np.sum(np.diff(magnitudes) < 0))
    p_value = math.nan
    if pairs:
        test = stats.binomtest(decreases, pairs, 0.5, alternative="greater")
        p_value = float(test.pvalue)
    return ZnRatioReport(tuple(rows), decreases, pairs, p_value)


def zn_ratio_experiment(
    J: StepDistribution,
    beta: float,
    lattice: TorusLattice,
    f: SmoothTestFunction,
    eps_sweep: Sequence[float],
    *,
    s: float = 0.0,
    gamma: float = 0.2,
    m2: float = 0.0,
    sweeps: int = 2000,
    chains: int = 32,
    rng: np.random.Generator | None = None,
    min_ess_fraction: float | None = None,
) -> ZnRatioReport:
    """Subtract the exact Gaussian part ``a²(β/2)(f_ε, C̃ f_ε)`` from the log-MGF.

    A positive ``m2`` switches to the mass gauge and to the massive ``C̃``.

    Raises:
        SamplerError: If an ``ε`` leaves the mesoscopic window or the
            reweighting degenerates. Sampled chains must also pass
            :func:`check_mixing`.
    """
    rng = rng or np.random.default_rng()
    ctilde = covariance_Ctilde(J, lattice, s, m2, gamma)
    rows: list[ZnRow] = []
    for eps in sorted(set(eps_sweep), reverse=True):
        _mesoscopic(eps, lattice)
        feps = build_feps(f, eps, lattice)
        x = _fsigma_samples(
            J, beta, lattice, feps, SamplerMode.MCMC, sweeps, chains, rng, m2=m2
        )
        est = estimate_log_mgf(x, min_ess_fraction=min_ess_fraction)
        gaussian = 0.5 * est.amplitude**2 * beta * quadratic_form(ctilde, feps)
        rows.append(
            ZnRow(
                eps,
                reported_scale(feps, lattice),
                est.amplitude,
                est.log_mgf,
                gaussian,
                est.se,
            )
        )
        log.info("ε=%g: remainder %.6g ± %.2g", eps, rows[-1].value, est.se)

    report = sign_test_decreasing(rows)
    log.info(
        "|remainder| dropped in %d of %d steps, sign-test p = %.3g",
        report.decreases,
        report.pairs,
        report.p_value,
    )
    return report
