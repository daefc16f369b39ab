"""Alpha-stable subordinator on a uniform grid and its discretized inverse."""

import logging
from dataclasses import dataclass, field
from typing import Self

import numpy as np

from tclevy.helpers import GridMismatchError, ParameterDomainError, ResourceCapError, require
from tclevy.kernels import RandomStream, sample_stable_increments

logger = logging.getLogger(__name__)

MAX_SUBORDINATOR_STEPS = 10**9
INITIAL_BLOCK = 1024


@dataclass(frozen=True)
class SubordinatorPath:
    """Grid values ``D(n * delta)`` of a subordinator, grown until they pass the horizon.

    ``values`` may run past index ``n_index + 1`` (see ``pad_to_multiple``); ``n_index`` is
    always the N with ``D(t_N) <= horizon < D(t_{N+1})``.
    """

    alpha: float
    delta: float
    values: np.ndarray = field(repr=False)
    horizon: float
    n_index: int = field(init=False)

    def __post_init__(self) -> None:
        require(0 < self.alpha < 1, f"alpha must lie in (0, 1), got {self.alpha}")
        require(0 < self.delta < 1, f"delta must lie in (0, 1), got {self.delta}")
        require(self.horizon > 0, f"horizon must be positive, got {self.horizon}")
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size < 2 or values[0] != 0:
            raise ParameterDomainError("subordinator values must start at 0 and hold two points")
        if np.any(np.diff(values) < 0):
            raise ParameterDomainError("subordinator values must be nondecreasing")
        if values[-1] <= self.horizon:
            raise ParameterDomainError(
                f"subordinator grid ends at {values[-1]} without passing horizon {self.horizon}"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        # count of grid values <= horizon, minus one
        object.__setattr__(
            self, "n_index", int(np.searchsorted(values, self.horizon, side="right")) - 1
        )

    @classmethod
    def from_values(cls, alpha: float, delta: float, values: list[float], horizon: float) -> Self:
        """Build a path from explicit grid values."""
        return cls(alpha, delta, np.asarray(values, dtype=float), horizon)

    @property
    def times(self) -> np.ndarray:
        """Grid times ``n * delta`` matching ``values``."""
        return np.arange(self.values.size) * self.delta


def simulate_subordinator(
    stream: RandomStream,
    alpha: float,
    delta: float,
    horizon: float,
    pad_to_multiple: int = 1,
) -> SubordinatorPath:
    """Accumulate stable increments on the grid ``n * delta`` until the path passes ``horizon``.

    The grid is grown in doubling blocks. With ``pad_to_multiple=k`` increments keep being
    drawn until the number of increments is a multiple of ``k``, so that coarsening by any
    divisor of ``k`` still yields a path passing the horizon.
    """
    require(0 < alpha < 1, f"alpha must lie in (0, 1), got {alpha}")
    require(0 < delta < 1, f"delta must lie in (0, 1), got {delta}")
    require(horizon > 0, f"horizon must be positive, got {horizon}")
    require(pad_to_multiple >= 1, f"pad_to_multiple must be positive, got {pad_to_multiple}")

    blocks: list[np.ndarray] = []
    total = 0.0
    drawn = 0
    block = INITIAL_BLOCK
    while total <= horizon:
        if drawn + block > MAX_SUBORDINATOR_STEPS:
            raise ResourceCapError(
                f"subordinator did not pass horizon {horizon} within {MAX_SUBORDINATOR_STEPS} "
                f"steps (alpha={alpha}, delta={delta})"
            )
        increments = sample_stable_increments(stream, alpha, delta, block)
        blocks.append(increments)
        drawn += block
        total += float(increments.sum())
        block *= 2

    values = np.concatenate(([0.0], np.cumsum(np.concatenate(blocks))))
    crossing = int(np.searchsorted(values, horizon, side="right"))
    # keep increments 1..crossing, rounded up to the padding multiple
    needed = -(-crossing // pad_to_multiple) * pad_to_multiple
    if needed > drawn:
        extra = sample_stable_increments(stream, alpha, delta, needed - drawn)
        values = np.concatenate((values, values[-1] + np.cumsum(extra)))
    path = SubordinatorPath(alpha, delta, values[: needed + 1], horizon)
    logger.debug("Subordinator passed T=%g after %d steps of %g", horizon, crossing, delta)
    return path


@dataclass(frozen=True)
class InverseTimeChange:
    """Step function ``E_delta(t) = n * delta`` for ``t`` in ``[D(n delta), D((n+1) delta))``."""

    path: SubordinatorPath
    breakpoints: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        breakpoints = self.path.values[: self.path.n_index + 1].copy()
        breakpoints.setflags(write=False)
        object.__setattr__(self, "breakpoints", breakpoints)

    @property
    def delta(self) -> float:
        return self.path.delta

    @property
    def horizon(self) -> float:
        return self.path.horizon

    @property
    def n_index(self) -> int:
        """Index N with ``E_delta(T) = N * delta``."""
        return self.path.n_index

    def index_at(self, t: float) -> int:
        """Return n with ``E_delta(t) = n * delta``."""
        if not 0 <= t <= self.horizon:
            raise ParameterDomainError(f"query time {t} outside [0, {self.horizon}]")
        return int(np.searchsorted(self.breakpoints, t, side="right")) - 1

    def indices(self, times: np.ndarray) -> np.ndarray:
        """Vectorized ``index_at``."""
        times = np.asarray(times, dtype=float)
        if np.any((times < 0) | (times > self.horizon)):
            raise ParameterDomainError(f"query times outside [0, {self.horizon}]")
        return np.searchsorted(self.breakpoints, times, side="right") - 1

    def evaluate(self, times: np.ndarray) -> np.ndarray:
        """Evaluate ``E_delta`` at an array of times."""
        return self.indices(times) * self.delta

    def staircase(self) -> tuple[np.ndarray, np.ndarray]:
        """Return the jump locations ``D(n delta)`` and the values ``n delta`` taken there."""
        return self.breakpoints, np.arange(self.breakpoints.size) * self.delta


def build_inverse(path: SubordinatorPath) -> InverseTimeChange:
    """Build the discretized inverse subordinator of ``path``."""
    return InverseTimeChange(path)


def eval_inverse(itc: InverseTimeChange, t: float) -> float:
    """Evaluate ``E_delta(t)`` for ``t`` in ``[0, T]``."""
    return itc.index_at(t) * itc.delta


def coarsen_path(path: SubordinatorPath, factor: int) -> SubordinatorPath:
    """Subsample every ``factor``-th grid value, giving the same path on stepsize factor*delta."""
    if factor < 1 or factor & (factor - 1):
        raise GridMismatchError(f"coarsening factor must be a power of two, got {factor}")
    if factor == 1:
        return path
    steps = path.values.size - 1
    if steps % factor:
        raise GridMismatchError(
            f"coarsening factor {factor} does not divide the {steps} stored steps"
        )
    coarse = path.values[::factor]
    if coarse[-1] <= path.horizon:
        raise GridMismatchError(
            f"coarsening by {factor} leaves no grid value past horizon {path.horizon}"
        )
    delta = path.delta * factor
    require(delta < 1, f"coarsened stepsize {delta} must be below 1")
    return SubordinatorPath(path.alpha, delta, coarse, path.horizon)
