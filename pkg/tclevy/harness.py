"""Coupled-noise Monte Carlo experiments for strong and weak convergence orders."""

import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Self

import numpy as np
from scipy import stats

from tclevy.helpers import (
    ConfigError,
    GridMismatchError,
    ParameterDomainError,
    ResourceCapError,
    StreamPurpose,
    TcLevyExceptionError,
    require,
)
from tclevy.kernels import (
    JumpBatch,
    LevyMeasureSpec,
    RandomStream,
    make_stream,
    sample_gaussian_increments,
    sample_jump_batch,
)
from tclevy.problems import SdeProblem
from tclevy.solver import (
    DiscretePath,
    IncrementBatch,
    SolverConfig,
    StepIncrements,
    simulate_original_path,
    simulate_terminal_batch,
)
from tclevy.timechange import (
    InverseTimeChange,
    SubordinatorPath,
    build_inverse,
    coarsen_path,
    simulate_subordinator,
)

logger = logging.getLogger(__name__)

MAX_FINE_STEPS = 10**8
BOOTSTRAP_RESAMPLES = 1000
BOOTSTRAP_CHUNK = 100
PATH_BATCH = 64

# Phi acts on states of shape (..., d) and returns shape (...)
Functional = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseGrid:
    """Finest-resolution Brownian increments and jump events shared by every stepsize."""

    fine_delta: float
    horizon: float
    brownian: np.ndarray = field(repr=False)
    jump_times: np.ndarray = field(repr=False)
    jump_marks: np.ndarray = field(repr=False)
    subordinator: SubordinatorPath | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.brownian.ndim != 2:
            raise ParameterDomainError("Brownian increments must be an (n_fine, m) array")
        if self.jump_times.shape != self.jump_marks.shape:
            raise ParameterDomainError("jump times and marks must have equal length")
        if self.jump_times.size and (
            self.jump_times[0] < 0
            or self.jump_times[-1] >= self.horizon
            or np.any(np.diff(self.jump_times) < 0)
        ):
            raise ParameterDomainError("jump times must be sorted and lie in [0, horizon)")

    @property
    def n_fine(self) -> int:
        return self.brownian.shape[0]


def generate_coupled_noise(
    stream: RandomStream,
    finest_delta: float,
    horizon: float,
    measure: LevyMeasureSpec,
    m: int,
    subordinator: SubordinatorPath | None = None,
) -> NoiseGrid:
    """Draw Brownian increments on the finest grid and one compound Poisson stream on [0, horizon).

    ``subordinator`` is only recorded, for callers that keep the time change with the noise.
    """
    require(horizon > 0, f"horizon must be positive, got {horizon}")
    require(finest_delta > 0, f"finest stepsize must be positive, got {finest_delta}")
    n_fine = round(horizon / finest_delta)
    if n_fine < 1 or not math.isclose(n_fine * finest_delta, horizon, rel_tol=1e-12):
        raise GridMismatchError(f"horizon {horizon} is not a multiple of {finest_delta}")
    if n_fine > MAX_FINE_STEPS:
        raise ResourceCapError(f"{n_fine} fine steps exceed the cap of {MAX_FINE_STEPS}")
    brownian = sample_gaussian_increments(
        stream.substream(StreamPurpose.BROWNIAN), finest_delta, m, n_fine
    )
    jumps = sample_jump_batch(stream.substream(StreamPurpose.JUMP_TIMES), measure, horizon)
    return NoiseGrid(finest_delta, horizon, brownian, jumps.offsets, jumps.marks, subordinator)


def _coarse_brownian(noise: NoiseGrid, coarse_delta: float) -> np.ndarray:
    factor = round(coarse_delta / noise.fine_delta)
    if factor < 1 or not math.isclose(factor * noise.fine_delta, coarse_delta, rel_tol=1e-12):
        raise GridMismatchError(
            f"coarse stepsize {coarse_delta} is not a multiple of {noise.fine_delta}"
        )
    if noise.n_fine % factor:
        raise GridMismatchError(
            f"{noise.n_fine} fine steps do not split into windows of {factor}"
        )
    return noise.brownian.reshape(noise.n_fine // factor, factor, -1).sum(axis=1)


def aggregate_noise(noise: NoiseGrid, coarse_delta: float) -> list[StepIncrements]:
    """Sum fine increments into steps of ``coarse_delta`` and bin jumps by window."""
    brownian = _coarse_brownian(noise, coarse_delta)
    n_coarse = brownian.shape[0]
    starts = np.arange(n_coarse + 1) * coarse_delta
    bounds = np.searchsorted(noise.jump_times, starts, side="left")
    bounds[-1] = noise.jump_times.size
    empty = JumpBatch.empty()
    increments = []
    for n in range(n_coarse):
        lo, hi = bounds[n], bounds[n + 1]
        jumps = empty
        if hi > lo:
            jumps = JumpBatch(noise.jump_times[lo:hi] - starts[n], noise.jump_marks[lo:hi])
        increments.append(StepIncrements(brownian[n], jumps))
    return increments


def batch_noise(noises: Sequence[NoiseGrid], coarse_delta: float, n_steps: int) -> IncrementBatch:
    """Stack the first ``n_steps`` coarse steps of several noise grids.

    Windows match ``aggregate_noise``; paths with fewer coarse steps are padded with zeros.
    """
    require(len(noises) >= 1, "need at least one noise grid")
    brownian = np.zeros((len(noises), n_steps, noises[0].brownian.shape[1]))
    steps, owners, marks = [], [], []
    for p, noise in enumerate(noises):
        coarse = _coarse_brownian(noise, coarse_delta)
        starts = np.arange(coarse.shape[0]) * coarse_delta
        windows = np.searchsorted(starts, noise.jump_times, side="right") - 1
        coarse = coarse[:n_steps]
        brownian[p, : coarse.shape[0]] = coarse
        keep = windows < n_steps
        steps.append(windows[keep])
        owners.append(np.full(np.count_nonzero(keep), p))
        marks.append(noise.jump_marks[keep])
    step_array = np.concatenate(steps)
    order = np.argsort(step_array, kind="stable")
    return IncrementBatch(
        brownian,
        step_array[order],
        np.concatenate(owners)[order],
        np.concatenate(marks)[order],
    )


@dataclass(frozen=True)
class ErrorRow:
    """Error estimate at one stepsize."""

    delta: float
    error: float
    stderr: float


@dataclass(frozen=True)
class ErrorTable:
    """Per-stepsize error estimates of one (theta, alpha) scheme.

    ``samples`` holds the per-path statistic behind each row (squared errors for strong
    tables, functional differences for weak tables), columns ordered like ``rows``.
    """

    kind: str
    theta: float
    alpha: float
    rows: tuple[ErrorRow, ...]
    ref_delta: float
    n_paths: int
    seed: int
    slope: float | None = None
    intercept: float | None = None
    slope_interval: tuple[float, float] | None = None
    samples: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self) -> None:
        if self.kind not in REDUCERS:
            raise ParameterDomainError(f"unknown error table kind {self.kind!r}")
        deltas = [row.delta for row in self.rows]
        if deltas != sorted(deltas, reverse=True):
            raise ParameterDomainError("error table rows must be sorted by delta descending")
        if any(row.error < 0 for row in self.rows):
            raise ParameterDomainError("error estimates must be nonnegative")
        if self.samples is not None and self.samples.shape[1:] != (len(self.rows),):
            raise ParameterDomainError("per-path samples need one column per row")

    @property
    def label(self) -> str:
        """Scheme label used in logs and file metadata."""
        return f"theta={self.theta:g}, alpha={self.alpha:g}"

    @property
    def deltas(self) -> np.ndarray:
        return np.array([row.delta for row in self.rows])

    @property
    def errors(self) -> np.ndarray:
        return np.array([row.error for row in self.rows])

    @classmethod
    def from_rows(  # noqa: PLR0913
        cls,
        rows: Iterable[tuple[float, float, float]],
        *,
        kind: str,
        theta: float,
        alpha: float,
        ref_delta: float,
        n_paths: int,
        seed: int,
        samples: np.ndarray | None = None,
    ) -> Self:
        """Build a table from ``(delta, error, stderr)`` triples in any order."""
        triples = [tuple(float(v) for v in row) for row in rows]
        order = sorted(range(len(triples)), key=lambda i: triples[i][0], reverse=True)
        return cls(
            kind,
            theta,
            alpha,
            tuple(ErrorRow(*triples[i]) for i in order),
            ref_delta,
            n_paths,
            seed,
            samples=None if samples is None else samples[:, order],
        )


def strong_errors(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """RMS errors from squared-error samples; standard errors by the delta method."""
    errors = np.sqrt(samples.mean(axis=0))
    spread = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        stderrs = np.where(errors > 0, spread / (2 * errors), 0.0)
    return errors, stderrs


def weak_errors(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Absolute mean of the coupled functional differences and its standard error."""
    errors = np.abs(samples.mean(axis=0))
    stderrs = samples.std(axis=0, ddof=1) / math.sqrt(samples.shape[0])
    return errors, stderrs


REDUCERS: dict[str, Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]] = {
    "strong": strong_errors,
    "weak": weak_errors,
}


def fit_order(table: ErrorTable) -> tuple[float, float]:
    """Least-squares slope and intercept of log2(error) against log2(delta)."""
    usable = [row for row in table.rows if row.error > 0]
    if len(usable) < len(table.rows):
        logger.warning(
            "Dropping %d rows without a positive error from the order fit of %s",
            len(table.rows) - len(usable),
            table.label,
        )
    if len(usable) < 2:
        raise ParameterDomainError("order fit needs at least two rows with positive error")
    fit = stats.linregress(
        np.log2([row.delta for row in usable]), np.log2([row.error for row in usable])
    )
    return float(fit.slope), float(fit.intercept)


def bootstrap_slope_interval(
    table: ErrorTable,
    stream: RandomStream,
    resamples: int = BOOTSTRAP_RESAMPLES,
    level: float = 0.95,
) -> tuple[float, float]:
    """Percentile interval of the fitted slope under resampling of whole paths.

    Rows without a positive error are left out of every refit, as in ``fit_order``.
    """
    require(table.samples is not None, "bootstrap needs the per-path samples of the table")
    require(resamples >= 1, f"need at least one resample, got {resamples}")
    require(0 < level < 1, f"confidence level must lie in (0, 1), got {level}")
    samples = np.asarray(table.samples)
    usable = table.errors > 0
    require(np.count_nonzero(usable) >= 2, "bootstrap needs two rows with positive error")
    reduce = REDUCERS[table.kind]
    n_paths = samples.shape[0]
    x = np.log2(table.deltas[usable])
    x = x - x.mean()

    slopes = []
    remaining = resamples
    while remaining > 0:
        chunk = min(BOOTSTRAP_CHUNK, remaining)
        remaining -= chunk
        picks = stream.generator.integers(0, n_paths, (chunk, n_paths))
        resampled = np.stack([reduce(samples[idx])[0] for idx in picks])
        with np.errstate(divide="ignore"):
            y = np.log2(resampled[:, usable])
        y = y[np.all(np.isfinite(y), axis=1)]
        slopes.append((y - y.mean(axis=1, keepdims=True)) @ x / (x @ x))
    slopes = np.concatenate(slopes)
    if slopes.size == 0:
        raise ParameterDomainError("every bootstrap resample produced a zero error")
    tail = 50 * (1 - level)
    lo, hi = np.percentile(slopes, [tail, 100 - tail])
    return float(lo), float(hi)


def functional_from_name(name: str) -> Functional:
    """Resolve a weak-error test functional by name (applied to the first state component)."""
    named: dict[str, Functional] = {
        "identity": lambda x: x[..., 0],
        "square": lambda x: x[..., 0] ** 2,
        "cube": lambda x: x[..., 0] ** 3,
        "sin": lambda x: np.sin(x[..., 0]),
    }
    if name in named:
        return named[name]
    if name.startswith("affine:"):
        try:
            scale, shift = (float(v) for v in name.removeprefix("affine:").split(","))
        except ValueError as e:
            raise ConfigError(f"Affine functional must be 'affine:a,b', got {name!r}") from e
        return lambda x: scale * x[..., 0] + shift
    raise ConfigError(f"Unknown functional {name!r}")


@dataclass(frozen=True)
class PathDraw:
    """Time changes of every ladder level and the shared noise of one path."""

    inverses: tuple[InverseTimeChange, ...]
    noise: NoiseGrid


class ConvergenceExperiment(ABC):
    """Monte Carlo error study on coupled noise across a stepsize ladder.

    Every path draws one subordinator on the reference grid and one noise grid; the
    reference and all coarse solutions are driven by aggregates of that noise.
    """

    kind: str

    def __init__(  # noqa: PLR0913
        self,
        problem: SdeProblem,
        theta: float,
        alpha: float,
        deltas: Iterable[float],
        ref_delta: float,
        n_paths: int,
        horizon: float,
        seed: int,
        threads: int = 1,
        newton_tolerance: float = 1e-5,
        bootstrap_resamples: int = BOOTSTRAP_RESAMPLES,
    ) -> None:
        """Validate the ladder and the stepsize guard before any simulation."""
        self.problem = problem
        self.theta = theta
        self.alpha = alpha
        self.deltas = sorted(deltas, reverse=True)
        self.ref_delta = ref_delta
        self.n_paths = n_paths
        self.horizon = horizon
        self.seed = seed
        self.threads = threads
        self.bootstrap_resamples = bootstrap_resamples

        require(len(self.deltas) >= 1, "need at least one stepsize")
        require(len(set(self.deltas)) == len(self.deltas), "stepsizes must be distinct")
        require(0 < alpha < 1, f"alpha must lie in (0, 1), got {alpha}")
        require(n_paths >= 2, f"need at least two paths, got {n_paths}")
        require(horizon > 0, f"horizon must be positive, got {horizon}")
        require(threads >= 1, f"threads must be positive, got {threads}")
        self.factors = [self._factor(delta) for delta in self.deltas]
        self.config = SolverConfig(theta, ref_delta, newton_tolerance)
        for delta in self.deltas:
            self.config.with_delta(delta).check_problem(problem)

    def _factor(self, delta: float) -> int:
        factor = round(delta / self.ref_delta)
        if (
            factor < 1
            or factor & (factor - 1)
            or not math.isclose(factor * self.ref_delta, delta, rel_tol=1e-12)
        ):
            raise GridMismatchError(
                f"stepsize {delta} is not a power-of-two multiple of reference {self.ref_delta}"
            )
        return factor

    def run(self) -> ErrorTable:
        """Simulate every path and reduce to an error table in path-index order."""
        logger.info(
            "Running %s experiment on %s: theta=%g, alpha=%g, %d paths, deltas=%s, ref=%g",
            self.kind,
            self.problem.name,
            self.theta,
            self.alpha,
            self.n_paths,
            self.deltas,
            self.ref_delta,
        )
        terminals = self._map_paths()
        samples = self.path_samples(terminals[:, :-1], terminals[:, -1:])
        errors, stderrs = REDUCERS[self.kind](samples)
        table = ErrorTable.from_rows(
            zip(self.deltas, errors, stderrs, strict=True),
            kind=self.kind,
            theta=self.theta,
            alpha=self.alpha,
            ref_delta=self.ref_delta,
            n_paths=self.n_paths,
            seed=self.seed,
            samples=samples,
        )
        if np.count_nonzero(table.errors > 0) < 2:
            logger.warning("Too few positive errors to fit an order for %s", table.label)
            return table
        slope, intercept = fit_order(table)
        interval = bootstrap_slope_interval(
            table,
            make_stream(self.seed, 0).substream(StreamPurpose.CHECKS),
            self.bootstrap_resamples,
        )
        logger.info(
            "Fitted %s order %.3f (95%% interval %.3f..%.3f) for %s",
            self.kind,
            slope,
            *interval,
            table.label,
        )
        return replace(table, slope=slope, intercept=intercept, slope_interval=interval)

    def _map_paths(self) -> np.ndarray:
        chunks = [
            range(lo, min(lo + PATH_BATCH, self.n_paths))
            for lo in range(0, self.n_paths, PATH_BATCH)
        ]
        if self.threads == 1:
            return np.concatenate([self.simulate_paths(chunk) for chunk in chunks])
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            return np.concatenate(list(executor.map(self.simulate_paths, chunks)))

    def simulate_path(self, path_id: int) -> np.ndarray:
        """Terminal time-changed values of path ``path_id`` at every ladder stepsize.

        Returns an array of shape ``(len(deltas) + 1, d)`` whose last row is the reference.
        """
        return self.simulate_paths([path_id])[0]

    def simulate_paths(self, path_ids: Sequence[int]) -> np.ndarray:
        """``simulate_path`` for several paths, stepping each level as one batch."""
        draws = [self._draw(p) for p in path_ids]
        factors = [*self.factors, 1]
        levels = [self._terminals(draws, level, k) for level, k in enumerate(factors)]
        return np.stack(levels, axis=1)

    def _draw(self, path_id: int) -> PathDraw:
        stream = make_stream(self.seed, path_id)
        largest = max(self.factors)
        subordinator = simulate_subordinator(
            stream.substream(StreamPurpose.SUBORDINATOR),
            self.alpha,
            self.ref_delta,
            self.horizon,
            pad_to_multiple=largest,
        )
        factors = [*self.factors, 1]
        inverses = tuple(build_inverse(coarsen_path(subordinator, k)) for k in factors)
        # original-time span reached by any level, rounded up to the coarsest grid
        fine_steps = max(itc.n_index * k for itc, k in zip(inverses, factors, strict=True))
        fine_steps = max(largest, -(-fine_steps // largest) * largest)
        noise = generate_coupled_noise(
            stream,
            self.ref_delta,
            fine_steps * self.ref_delta,
            self.problem.measure,
            self.problem.noise_dim,
            subordinator,
        )
        logger.debug("Path %d: reference reaches step %d", path_id, inverses[-1].n_index)
        return PathDraw(inverses, noise)

    def _terminals(self, draws: Sequence[PathDraw], level: int, factor: int) -> np.ndarray:
        delta = factor * self.ref_delta
        n_steps = np.array([draw.inverses[level].n_index for draw in draws])
        batch = batch_noise([draw.noise for draw in draws], delta, int(n_steps.max(initial=0)))
        try:
            return simulate_terminal_batch(
                self.problem, self.config.with_delta(delta), batch, n_steps
            )
        except TcLevyExceptionError as e:
            e.add_note(f"at stepsize {delta:g} of the {self.kind} ladder")
            raise

    @abstractmethod
    def path_samples(self, coarse: np.ndarray, reference: np.ndarray) -> np.ndarray:
        """Per-path statistic for every level, shape ``(n_paths, len(deltas))``.

        ``coarse`` has shape ``(n_paths, len(deltas), d)``, ``reference`` ``(n_paths, 1, d)``.
        """


class StrongErrorExperiment(ConvergenceExperiment):
    """Root-mean-square error of ``X_delta(T)`` against the reference solution."""

    kind = "strong"

    def path_samples(self, coarse: np.ndarray, reference: np.ndarray) -> np.ndarray:
        return np.sum((coarse - reference) ** 2, axis=-1)


class WeakErrorExperiment(ConvergenceExperiment):
    """Error of ``E[Phi(X_delta(T))]`` against the coupled reference mean.

    The scheme is always Euler-Maruyama (theta = 0).
    """

    kind = "weak"

    def __init__(  # noqa: PLR0913
        self,
        problem: SdeProblem,
        phi: Functional,
        alpha: float,
        deltas: Iterable[float],
        ref_delta: float,
        n_paths: int,
        horizon: float,
        seed: int,
        threads: int = 1,
        bootstrap_resamples: int = BOOTSTRAP_RESAMPLES,
    ) -> None:
        """Fix theta to zero and remember the test functional."""
        self.phi = phi
        if not problem.moment_bounds_asserted:
            logger.warning(
                "%s does not assert the moment bounds the weak order relies on", problem.name
            )
        super().__init__(
            problem,
            0.0,
            alpha,
            deltas,
            ref_delta,
            n_paths,
            horizon,
            seed,
            threads,
            bootstrap_resamples=bootstrap_resamples,
        )

    def path_samples(self, coarse: np.ndarray, reference: np.ndarray) -> np.ndarray:
        return self.phi(coarse) - self.phi(reference)


def strong_error_experiment(  # noqa: PLR0913
    problem: SdeProblem,
    theta: float,
    alpha: float,
    deltas: Iterable[float],
    ref_delta: float,
    n_paths: int,
    horizon: float,
    seed: int,
    threads: int = 1,
    newton_tolerance: float = 1e-5,
) -> ErrorTable:
    """Estimate strong errors of the theta method on coupled noise."""
    return StrongErrorExperiment(
        problem,
        theta,
        alpha,
        deltas,
        ref_delta,
        n_paths,
        horizon,
        seed,
        threads,
        newton_tolerance,
    ).run()


def weak_error_experiment(  # noqa: PLR0913
    problem: SdeProblem,
    phi: Functional,
    alpha: float,
    deltas: Iterable[float],
    ref_delta: float,
    n_paths: int,
    horizon: float,
    seed: int,
    threads: int = 1,
) -> ErrorTable:
    """Estimate weak errors of Euler-Maruyama on coupled noise."""
    return WeakErrorExperiment(
        problem, phi, alpha, deltas, ref_delta, n_paths, horizon, seed, threads
    ).run()


@dataclass(frozen=True)
class TimeChangedSample:
    """One simulated time-changed path with everything needed to plot it."""

    subordinator: SubordinatorPath
    inverse: InverseTimeChange
    path: DiscretePath


def sample_time_changed_path(
    problem: SdeProblem,
    config: SolverConfig,
    alpha: float,
    horizon: float,
    seed: int,
    stream_id: int = 0,
) -> TimeChangedSample:
    """Simulate one path of ``X_delta`` on ``[0, horizon]``."""
    stream = make_stream(seed, stream_id)
    subordinator = simulate_subordinator(
        stream.substream(StreamPurpose.SUBORDINATOR), alpha, config.delta, horizon
    )
    inverse = build_inverse(subordinator)
    steps = max(inverse.n_index, 1)
    noise = generate_coupled_noise(
        stream,
        config.delta,
        steps * config.delta,
        problem.measure,
        problem.noise_dim,
        subordinator,
    )
    path = simulate_original_path(problem, config, aggregate_noise(noise, config.delta), steps)
    return TimeChangedSample(subordinator, inverse, path)
