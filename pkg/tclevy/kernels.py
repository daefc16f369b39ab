"""Random streams and samplers for Gaussian, one-sided stable and compound Poisson noise."""

import functools
import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Self

import numpy as np
from numpy.polynomial import hermite_e, legendre

from tclevy.helpers import (
    ParameterDomainError,
    QuadratureConvergenceError,
    StreamPurpose,
    require,
)

logger = logging.getLogger(__name__)

MarkSampler = Callable[[np.random.Generator, int], np.ndarray]
Density = Callable[[np.ndarray], np.ndarray]
# h(t, x, z): x has shape (..., d), z has the batch shape (...), result (..., d)
JumpCoefficient = Callable[[float, np.ndarray, np.ndarray], np.ndarray]
Compensator = Callable[[float, np.ndarray], np.ndarray]

QUADRATURE_NODES = (64, 128, 256)
QUADRATURE_RTOL = 1e-8
QUADRATURE_ATOL = 1e-12

_UINT64_MAX = 2**64 - 1


@dataclass
class RandomStream:
    """Deterministic, splittable random stream.

    A stream is keyed by ``(seed, stream_id)`` plus an optional child key; equal keys give
    identical output, distinct keys give independent Philox counter streams.
    """

    seed: int
    stream_id: int
    key: tuple[int, ...] = ()
    generator: np.random.Generator = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        for name, value in (("seed", self.seed), ("stream_id", self.stream_id)):
            if not 0 <= value <= _UINT64_MAX:
                raise ParameterDomainError(f"{name} must be a 64-bit unsigned integer, got {value}")
        sequence = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id, *self.key))
        self.generator = np.random.Generator(np.random.Philox(sequence))

    def substream(self, purpose: StreamPurpose | int) -> Self:
        """Return an independent child stream for one source of randomness."""
        return type(self)(self.seed, self.stream_id, (*self.key, int(purpose)))

    def uniform(self, count: int) -> np.ndarray:
        """Draw ``count`` uniforms on [0, 1)."""
        return self.generator.random(count)


def make_stream(seed: int, stream_id: int) -> RandomStream:
    """Create the random stream of Monte Carlo path ``stream_id`` under ``seed``."""
    return RandomStream(seed, stream_id)


@dataclass(frozen=True)
class LevyMeasureSpec:
    """Finite-activity jump measure restricted to ``{|z| < c}``.

    Attributes:
        truncation_radius: c, possibly ``math.inf`` when the measure is finite on all of R
        total_mass: lambda_c, the measure of ``{|z| < c}``
        mark_sampler: draws marks from the normalized measure
        second_moment: integral of z**2 against the measure
        density: Lebesgue density of the measure, needed only for quadrature
        symmetric: the measure is invariant under z -> -z

    """

    truncation_radius: float
    total_mass: float
    mark_sampler: MarkSampler = field(compare=False)
    second_moment: float
    density: Density | None = field(default=None, compare=False)
    symmetric: bool = False
    name: str = "custom"

    def __post_init__(self) -> None:
        require(
            self.truncation_radius > 0,
            f"truncation radius must be positive, got {self.truncation_radius}",
        )
        require(
            math.isfinite(self.total_mass),
            "Levy measure must have finite activity on {|z|<c}",
        )
        require(self.total_mass >= 0, f"total mass must be nonnegative, got {self.total_mass}")
        require(self.second_moment >= 0, "second moment must be nonnegative")

    @classmethod
    def none(cls) -> Self:
        """Measure with no jumps at all."""
        return cls(
            math.inf, 0.0, _no_marks, 0.0, density=_zero_density, symmetric=True, name="none"
        )

    @classmethod
    def gaussian(cls, mass: float = 2.0, scale: float = 1.0) -> Self:
        """Measure ``mass * N(0, scale**2)`` on R.

        The default is the worked example's ``(2/sqrt(2 pi)) exp(-z**2/2) dz``.
        """
        require(scale > 0, f"mark scale must be positive, got {scale}")

        def sampler(generator: np.random.Generator, count: int) -> np.ndarray:
            return generator.normal(0.0, scale, count)

        def density(z: np.ndarray) -> np.ndarray:
            return mass * np.exp(-0.5 * (z / scale) ** 2) / (scale * math.sqrt(2 * math.pi))

        return cls(
            math.inf,
            mass,
            sampler,
            mass * scale**2,
            density=density,
            symmetric=True,
            name=f"gaussian({mass:g},{scale:g})",
        )

    @classmethod
    def uniform(cls, mass: float, radius: float) -> Self:
        """Measure with constant density on ``(-radius, radius)`` and total mass ``mass``."""
        require(radius > 0, f"radius must be positive, got {radius}")

        def sampler(generator: np.random.Generator, count: int) -> np.ndarray:
            marks = generator.uniform(-radius, radius, count)
            # uniform() may return the closed endpoint -radius
            return np.where(marks <= -radius, 0.0, marks)

        def density(z: np.ndarray) -> np.ndarray:
            return np.where(np.abs(z) < radius, mass / (2 * radius), 0.0)

        return cls(
            radius,
            mass,
            sampler,
            mass * radius**2 / 3,
            density=density,
            symmetric=True,
            name=f"uniform({mass:g},{radius:g})",
        )

    def sample_marks(self, stream: RandomStream, count: int) -> np.ndarray:
        """Draw ``count`` marks from the normalized measure."""
        if count == 0 or self.total_mass == 0:
            return np.zeros(count)
        return np.asarray(self.mark_sampler(stream.generator, count), dtype=float)


def _no_marks(_generator: np.random.Generator, count: int) -> np.ndarray:
    return np.zeros(count)


def _zero_density(z: np.ndarray) -> np.ndarray:
    return np.zeros_like(z)


@dataclass(frozen=True)
class JumpBatch:
    """Jumps falling in one step: arrival offsets from the step start and their marks."""

    offsets: np.ndarray
    marks: np.ndarray

    def __post_init__(self) -> None:
        if self.offsets.shape != self.marks.shape:
            raise ParameterDomainError("jump offsets and marks must have equal length")
        if self.offsets.size > 1 and np.any(np.diff(self.offsets) < 0):
            raise ParameterDomainError("jump offsets must be sorted ascending")

    def __len__(self) -> int:
        return int(self.marks.size)

    @classmethod
    def empty(cls) -> Self:
        """Batch without jumps."""
        return cls(np.zeros(0), np.zeros(0))


def sample_gaussian_increments(stream: RandomStream, dt: float, m: int, count: int) -> np.ndarray:
    """Draw ``count`` independent N(0, dt I_m) increments as a ``(count, m)`` array."""
    require(dt > 0, f"dt must be positive, got {dt}")
    require(m >= 1, f"Brownian dimension must be at least 1, got {m}")
    return stream.generator.normal(0.0, math.sqrt(dt), (count, m))


def sample_gaussian_increment(stream: RandomStream, dt: float, m: int) -> np.ndarray:
    """Draw one N(0, dt I_m) Brownian increment."""
    return sample_gaussian_increments(stream, dt, m, 1)[0]


def sample_stable_increments(
    stream: RandomStream, alpha: float, dt: float, count: int
) -> np.ndarray:
    """Draw ``count`` one-sided stable increments with Laplace transform exp(-dt * lam**alpha).

    Chambers-Mallows-Stuck for the totally skewed case with scale dt**(1/alpha).
    """
    require(0 < alpha < 1, f"alpha must lie in (0, 1), got {alpha}")
    require(dt > 0, f"dt must be positive, got {dt}")
    draws = _cms_draws(stream.generator, alpha, count)
    # U = -pi/2 or E = 0 happen with probability ~2**-53 and give 0 or inf
    bad = ~np.isfinite(draws) | (draws <= 0)
    while np.any(bad):
        draws[bad] = _cms_draws(stream.generator, alpha, int(bad.sum()))
        bad = ~np.isfinite(draws) | (draws <= 0)
    return dt ** (1 / alpha) * draws


def _cms_draws(generator: np.random.Generator, alpha: float, count: int) -> np.ndarray:
    u = generator.uniform(-np.pi / 2, np.pi / 2, count)
    e = generator.standard_exponential(count)
    shifted = alpha * (u + np.pi / 2)
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        head = np.sin(shifted) / np.cos(u) ** (1 / alpha)
        tail = (np.cos(u - shifted) / e) ** ((1 - alpha) / alpha)
    return head * tail


def sample_stable_increment(stream: RandomStream, alpha: float, dt: float) -> float:
    """Draw one increment of the alpha-stable subordinator over a step of length ``dt``."""
    return float(sample_stable_increments(stream, alpha, dt, 1)[0])


def sample_jump_batch(stream: RandomStream, measure: LevyMeasureSpec, dt: float) -> JumpBatch:
    """Draw the compound Poisson jumps of ``measure`` over a window of length ``dt``."""
    require(dt > 0, f"dt must be positive, got {dt}")
    if measure.total_mass == 0:
        return JumpBatch.empty()
    count = int(stream.generator.poisson(measure.total_mass * dt))
    if count == 0:
        return JumpBatch.empty()
    offsets = np.sort(stream.generator.uniform(0.0, dt, count))
    marks = measure.sample_marks(stream, count)
    return JumpBatch(offsets, marks)


def compensator_value(
    measure: LevyMeasureSpec,
    jump: JumpCoefficient,
    t: float,
    x: np.ndarray,
    analytic: Compensator | None = None,
) -> np.ndarray:
    """Integrate ``h(t, x, z)`` against the Levy measure.

    The analytic compensator is used when supplied. Otherwise Gauss-Legendre (finite radius)
    or Gauss-Hermite (infinite radius) quadrature is refined by node doubling until the
    result settles.
    """
    x = np.asarray(x, dtype=float)
    if analytic is not None:
        return np.asarray(analytic(t, x), dtype=float)
    if measure.total_mass == 0:
        return np.zeros_like(x)
    if measure.density is None:
        raise QuadratureConvergenceError(
            f"measure {measure.name} has no density; supply an analytic compensator"
        )

    previous = _quadrature(measure, jump, t, x, QUADRATURE_NODES[0])
    for nodes in QUADRATURE_NODES[1:]:
        current = _quadrature(measure, jump, t, x, nodes)
        change = np.max(np.abs(current - previous), initial=0.0)
        scale = np.max(np.abs(current), initial=0.0)
        if change <= QUADRATURE_RTOL * scale + QUADRATURE_ATOL:
            return current
        logger.debug("Compensator quadrature change %g at %d nodes", change, nodes)
        previous = current
    raise QuadratureConvergenceError(
        f"compensator quadrature for {measure.name} did not settle at {QUADRATURE_NODES[-1]} nodes"
    )


@functools.cache
def _rule(radius: float, nodes: int) -> tuple[np.ndarray, np.ndarray, bool]:
    """Quadrature nodes and weights; the flag marks a Gaussian-weighted rule."""
    if math.isinf(radius):
        points, weights = hermite_e.hermegauss(nodes)
        return points, weights, True
    points, weights = legendre.leggauss(nodes)
    return radius * points, radius * weights, False


def _quadrature(
    measure: LevyMeasureSpec, jump: JumpCoefficient, t: float, x: np.ndarray, nodes: int
) -> np.ndarray:
    points, weights, gaussian_weight = _rule(measure.truncation_radius, nodes)
    density = measure.density(points)
    if gaussian_weight:
        density = density * np.exp(points**2 / 2)
    batch = x.shape[:-1]
    z = np.broadcast_to(points.reshape((nodes,) + (1,) * len(batch)), (nodes, *batch))
    values = jump(t, np.broadcast_to(x, (nodes, *x.shape)), z)
    return np.tensordot(weights * density, values, axes=(0, 0))
