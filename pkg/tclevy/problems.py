"""SDE problem definitions: coefficient contract, worked example and linear oracle problem."""

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from tclevy.helpers import ConfigError, ParameterDomainError, require
from tclevy.kernels import (
    Compensator,
    JumpCoefficient,
    LevyMeasureSpec,
    RandomStream,
    compensator_value,
)

logger = logging.getLogger(__name__)

# f(t, x): (..., d) -> (..., d); g(t, x): (..., d) -> (..., d, m)
Drift = Callable[[float, np.ndarray], np.ndarray]
Diffusion = Callable[[float, np.ndarray], np.ndarray]
DriftJacobian = Callable[[float, np.ndarray], np.ndarray]

SPOT_CHECK_SLACK = 1.01


@dataclass(frozen=True)
class LinearCoefficients:
    """Coefficients of ``dY = a Y dt + b Y dW + s Y z dN~``."""

    a: float
    b: float
    jump_scale: float


@dataclass(frozen=True)
class SdeProblem:
    """An SDE on the natural clock, ``dY = f dt + g dW + int h dN~``.

    Coefficients are pure functions vectorized over leading batch axes. ``compensator`` is
    the analytic ``int h(t, x, z) nu(dz)``; leave it ``None`` to fall back to quadrature.
    """

    name: str
    dim: int
    noise_dim: int
    x0: np.ndarray
    drift: Drift = field(compare=False)
    diffusion: Diffusion = field(compare=False)
    jump: JumpCoefficient = field(compare=False)
    measure: LevyMeasureSpec
    lipschitz_constant: float
    hoelder_gamma: float
    compensator: Compensator | None = field(default=None, compare=False)
    drift_jacobian: DriftJacobian | None = field(default=None, compare=False)
    linear: LinearCoefficients | None = None
    moment_bounds_asserted: bool = False

    def __post_init__(self) -> None:
        require(self.dim >= 1, f"state dimension must be at least 1, got {self.dim}")
        require(self.noise_dim >= 1, f"Brownian dimension must be at least 1, got {self.noise_dim}")
        require(self.lipschitz_constant > 0, "Lipschitz constant C* must be positive")
        require(self.hoelder_gamma > 0, "Hoelder exponent gamma must be positive")
        x0 = np.array(self.x0, dtype=float).reshape(-1)
        if x0.shape != (self.dim,):
            raise ParameterDomainError(f"x0 must have shape ({self.dim},), got {x0.shape}")
        x0.setflags(write=False)
        object.__setattr__(self, "x0", x0)

    def compensator_at(self, t: float, x: np.ndarray) -> np.ndarray:
        """Return ``int h(t, x, z) nu(dz)`` over ``{|z| < c}``."""
        return compensator_value(self.measure, self.jump, t, x, self.compensator)

    def check_lipschitz(self, stream: RandomStream, pairs: int = 1000, box: float = 5.0) -> float:
        """Spot-check the global Lipschitz bound on random pairs.

        Returns the largest observed ratio of the coefficient increments to ``C* |x - y|**2``;
        values up to ``SPOT_CHECK_SLACK`` are consistent with the declared constant.
        """
        generator = stream.generator
        xs = generator.uniform(-box, box, (pairs, self.dim))
        ys = generator.uniform(-box, box, (pairs, self.dim))
        ts = generator.uniform(0.0, box, pairs)
        worst = 0.0
        for t, x, y in zip(ts, xs, ys, strict=True):
            distance = float(np.sum((x - y) ** 2))
            if distance == 0:
                continue
            increment = float(np.sum((self.drift(t, x) - self.drift(t, y)) ** 2))
            increment += float(np.sum((self.diffusion(t, x) - self.diffusion(t, y)) ** 2))
            increment += self._jump_increment(t, x, y)
            worst = max(worst, increment / (self.lipschitz_constant * distance))
        logger.debug("Lipschitz spot check on %s: worst ratio %.4f", self.name, worst)
        return worst

    def _jump_increment(self, t: float, x: np.ndarray, y: np.ndarray) -> float:
        if self.linear is not None:
            scale = self.linear.jump_scale
            return scale**2 * self.measure.second_moment * float(np.sum((x - y) ** 2))
        if self.measure.density is None:
            return 0.0

        def squared(t: float, _x: np.ndarray, z: np.ndarray) -> np.ndarray:
            batch = z.shape
            x_b = np.broadcast_to(x, (*batch, self.dim))
            y_b = np.broadcast_to(y, (*batch, self.dim))
            return (self.jump(t, x_b, z) - self.jump(t, y_b, z)) ** 2

        return float(np.sum(compensator_value(self.measure, squared, t, x)))

    def check_time_hoelder(
        self, stream: RandomStream, samples: int = 1000, box: float = 5.0
    ) -> float:
        """Spot-check ``|f(t,x)-f(s,x)|**2 + |g(t,x)-g(s,x)|**2 <= 2 (1+|x|**2) |t-s|**gamma``.

        Returns the largest observed ratio of left to right side.
        """
        generator = stream.generator
        xs = generator.uniform(-box, box, (samples, self.dim))
        ts = generator.uniform(0.0, box, samples)
        ss = generator.uniform(0.0, box, samples)
        worst = 0.0
        for t, s, x in zip(ts, ss, xs, strict=True):
            if t == s:
                continue
            lhs = float(np.sum((self.drift(t, x) - self.drift(s, x)) ** 2))
            lhs += float(np.sum((self.diffusion(t, x) - self.diffusion(s, x)) ** 2))
            rhs = 2 * (1 + float(np.sum(x**2))) * abs(t - s) ** self.hoelder_gamma
            worst = max(worst, lhs / rhs)
        return worst


def builtin_paper_example() -> SdeProblem:
    """The worked example ``dY = (sin t + Y) dt + (t + sin Y) dW + int Y z dN~``.

    The jump measure is ``2 N(0, 1)`` on R and the compensator vanishes by symmetry.
    """

    def drift(t: float, x: np.ndarray) -> np.ndarray:
        return math.sin(t) + x

    def diffusion(t: float, x: np.ndarray) -> np.ndarray:
        return (t + np.sin(x))[..., np.newaxis]

    def jump(_t: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return x * np.asarray(z)[..., np.newaxis]

    def compensator(_t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def drift_jacobian(_t: float, x: np.ndarray) -> np.ndarray:
        return np.ones((*x.shape, 1))

    measure = LevyMeasureSpec.gaussian(2.0, 1.0)
    return SdeProblem(
        name="paper-example",
        dim=1,
        noise_dim=1,
        x0=np.array([1.0]),
        drift=drift,
        diffusion=diffusion,
        jump=jump,
        measure=measure,
        # f, g and the jump term contribute 1, 1 and int z**2 nu(dz) = 2
        lipschitz_constant=4.0,
        hoelder_gamma=2.0,
        compensator=compensator,
        drift_jacobian=drift_jacobian,
        moment_bounds_asserted=True,
    )


def builtin_linear_problem(
    a: float,
    b: float,
    jump_scale: float,
    x0: float = 1.0,
    measure: LevyMeasureSpec | None = None,
) -> SdeProblem:
    """Scalar linear problem ``dY = a Y dt + b Y dW + int s Y z dN~`` with a known second moment."""
    measure = measure if measure is not None else LevyMeasureSpec.gaussian(2.0, 1.0)

    def drift(_t: float, x: np.ndarray) -> np.ndarray:
        return a * x

    def diffusion(_t: float, x: np.ndarray) -> np.ndarray:
        return (b * x)[..., np.newaxis]

    def jump(_t: float, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return jump_scale * x * np.asarray(z)[..., np.newaxis]

    def odd_compensator(_t: float, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    def drift_jacobian(_t: float, x: np.ndarray) -> np.ndarray:
        return np.full((*x.shape, 1), a)

    # any positive constant bounds the zero-dynamics problem
    lipschitz = a**2 + b**2 + jump_scale**2 * measure.second_moment or 1.0
    return SdeProblem(
        name=f"linear:{a:g},{b:g},{jump_scale:g}",
        dim=1,
        noise_dim=1,
        x0=np.array([x0]),
        drift=drift,
        diffusion=diffusion,
        jump=jump,
        measure=measure,
        lipschitz_constant=lipschitz,
        hoelder_gamma=1.0,
        compensator=odd_compensator if measure.symmetric else None,
        drift_jacobian=drift_jacobian,
        linear=LinearCoefficients(a, b, jump_scale),
        moment_bounds_asserted=True,
    )


def linear_second_moment(problem: SdeProblem, t: float) -> float:
    """Exact ``E[|Y(t)|**2]`` of a problem built by ``builtin_linear_problem``."""
    if problem.linear is None:
        raise ParameterDomainError(f"{problem.name} is not a builtin linear problem")
    coeffs = problem.linear
    rate = 2 * coeffs.a + coeffs.b**2 + coeffs.jump_scale**2 * problem.measure.second_moment
    return float(np.sum(problem.x0**2)) * math.exp(rate * t)


def problem_from_name(name: str) -> SdeProblem:
    """Resolve a CLI problem name: ``paper-example`` or ``linear:a,b,s``."""
    if name == "paper-example":
        return builtin_paper_example()
    if name.startswith("linear:"):
        try:
            a, b, s = (float(part) for part in name.removeprefix("linear:").split(","))
        except ValueError as e:
            raise ConfigError(f"Linear problem must be 'linear:a,b,s', got {name!r}") from e
        return builtin_linear_problem(a, b, s)
    raise ConfigError(f"Unknown problem {name!r} (expected 'paper-example' or 'linear:a,b,s')")
