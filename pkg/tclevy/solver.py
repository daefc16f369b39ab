"""Stochastic theta method for jump SDEs and its composition with the inverse time change."""

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Self

import numpy as np

from tclevy.helpers import (
    GridMismatchError,
    NewtonConvergenceError,
    ParameterDomainError,
    SingularJacobianError,
    StreamPurpose,
    TcLevyExceptionError,
    WellPosednessError,
    require,
)
from tclevy.kernels import JumpBatch, RandomStream, sample_gaussian_increments
from tclevy.problems import SdeProblem
from tclevy.timechange import InverseTimeChange

logger = logging.getLogger(__name__)

MAX_CONDITION = 1e12
FD_STEP = math.sqrt(np.finfo(float).eps)

Residual = Callable[[np.ndarray], np.ndarray]
Jacobian = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of the stochastic theta method."""

    theta: float
    delta: float
    newton_tolerance: float = 1e-5
    newton_max_iterations: int = 50

    def __post_init__(self) -> None:
        require(0 <= self.theta <= 1, f"theta must lie in [0, 1], got {self.theta}")
        require(0 < self.delta < 1, f"delta must lie in (0, 1), got {self.delta}")
        require(self.newton_tolerance > 0, "Newton tolerance must be positive")
        require(self.newton_max_iterations >= 1, "Newton needs at least one iteration")

    def with_delta(self, delta: float) -> Self:
        """Copy of this config on another stepsize."""
        return type(self)(self.theta, delta, self.newton_tolerance, self.newton_max_iterations)

    def check_problem(self, problem: SdeProblem) -> None:
        """Enforce ``theta * sqrt(C*) * delta < 1`` for ``problem``.

        Warns when the stronger ``theta * (1 + sqrt(C*)) * delta < 1/2`` fails, under which
        the strong error bound is no longer covered.
        """
        root = math.sqrt(problem.lipschitz_constant)
        if self.theta * root * self.delta >= 1:
            raise WellPosednessError(
                f"theta*sqrt(Cstar)*delta must be < 1, got {self.theta}*sqrt("
                f"{problem.lipschitz_constant})*{self.delta} = {self.theta * root * self.delta:g}"
            )
        if self.theta * (1 + root) * self.delta >= 0.5:
            logger.warning(
                "theta*(1+sqrt(Cstar))*delta = %g is not below 1/2; strong error bound not covered",
                self.theta * (1 + root) * self.delta,
            )


@dataclass(frozen=True)
class StepIncrements:
    """Brownian increment and jumps driving one step."""

    brownian: np.ndarray
    jumps: JumpBatch = field(default_factory=JumpBatch.empty)


@dataclass(frozen=True)
class DiscretePath:
    """Grid values ``Y_n`` at ``t_n = n * delta``."""

    delta: float
    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise ParameterDomainError("path values must be a nonempty (steps + 1, d) array")

    @property
    def n_steps(self) -> int:
        return self.values.shape[0] - 1

    @property
    def times(self) -> np.ndarray:
        """Grid times of ``values``."""
        return np.arange(self.values.shape[0]) * self.delta


def finite_difference_jacobian(residual: Residual, x: np.ndarray) -> np.ndarray:
    """Forward-difference Jacobian with per-component step ``sqrt(eps) * (1 + |x_j|)``."""
    base = residual(x)
    dim = x.shape[-1]
    jac = np.empty((*x.shape, dim))
    for j in range(dim):
        step = FD_STEP * (1 + np.abs(x[..., j]))
        shifted = x.copy()
        shifted[..., j] += step
        jac[..., :, j] = (residual(shifted) - base) / step[..., np.newaxis]
    return jac


def newton_solve(
    residual: Residual,
    jacobian: Jacobian | None,
    x0: np.ndarray,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Solve ``residual(x) = 0`` by Newton's method, batched over leading axes.

    Returns x with ``|residual(x)| <= tol`` for every batch member. A member stops moving
    once it is within tolerance, so its iterates match those of a solo solve.

    Raises:
        SingularJacobianError: the Jacobian condition number exceeds ``MAX_CONDITION``
        NewtonConvergenceError: ``max_iter`` iterations did not reach ``tol``

    """
    require(tol > 0, f"Newton tolerance must be positive, got {tol}")
    x = np.array(x0, dtype=float)
    dim = x.shape[-1]
    r = residual(x)
    for iteration in range(max_iter):
        active = (np.linalg.norm(r, axis=-1) > tol).reshape(-1)
        if not np.any(active):
            return x
        jac = jacobian(x) if jacobian is not None else finite_difference_jacobian(residual, x)
        jac = np.broadcast_to(jac, (*x.shape, dim)).reshape(-1, dim, dim)
        flat = x.reshape(-1, dim)
        flat[active] += _newton_update(jac[active], r.reshape(-1, dim)[active])
        x = flat.reshape(x.shape)
        r = residual(x)
        logger.debug("Newton iteration %d: residual %g", iteration + 1, np.max(np.abs(r)))
    if np.all(np.linalg.norm(r, axis=-1) <= tol):
        return x
    raise NewtonConvergenceError(
        f"Newton did not reach tolerance {tol} in {max_iter} iterations "
        f"(residual {np.max(np.linalg.norm(r, axis=-1)):g})"
    )


def _newton_update(jac: np.ndarray, r: np.ndarray) -> np.ndarray:
    if jac.shape[-1] == 1:
        pivot = jac[..., 0]
        if np.any(~np.isfinite(pivot) | (np.abs(pivot) < 1 / MAX_CONDITION)):
            raise SingularJacobianError("Newton Jacobian is singular")
        return -r / pivot
    cond = np.linalg.cond(jac)
    if np.any(~np.isfinite(cond) | (cond > MAX_CONDITION)):
        raise SingularJacobianError(f"Newton Jacobian condition {np.max(cond):g} too large")
    return -np.linalg.solve(jac, r[..., np.newaxis])[..., 0]


def jump_term(
    problem: SdeProblem, t: float, y: np.ndarray, jumps: JumpBatch, delta: float
) -> np.ndarray:
    """Compensated jump contribution ``sum_i h(t, y, z_i) - delta * int h(t, y, z) nu(dz)``."""
    total = np.zeros_like(y)
    if len(jumps):
        states = np.broadcast_to(y, (len(jumps), *y.shape))
        total = np.sum(problem.jump(t, states, jumps.marks), axis=0)
    return total - delta * problem.compensator_at(t, y)


def _theta_update(
    problem: SdeProblem,
    config: SolverConfig,
    t_n: float,
    y_n: np.ndarray,
    brownian: np.ndarray,
    jumps: np.ndarray,
) -> np.ndarray:
    """One theta step over any leading batch axes; ``jumps`` is the compensated jump term."""
    theta, delta = config.theta, config.delta
    drift_n = problem.drift(t_n, y_n)
    noise = (problem.diffusion(t_n, y_n) @ brownian[..., np.newaxis])[..., 0]
    if theta == 0:
        return y_n + drift_n * delta + noise + jumps

    t_next = t_n + delta
    known = y_n + (1 - theta) * drift_n * delta + noise + jumps

    def residual(y: np.ndarray) -> np.ndarray:
        return y - theta * delta * problem.drift(t_next, y) - known

    predictor = y_n + drift_n * delta + noise + jumps
    return newton_solve(
        residual,
        _implicit_jacobian(problem, theta * delta, t_next),
        predictor,
        config.newton_tolerance,
        config.newton_max_iterations,
    )


def _implicit_jacobian(problem: SdeProblem, scale: float, t_next: float) -> Jacobian | None:
    """Analytic ``I - theta delta df/dx``, or None to fall back to finite differences."""
    drift_jacobian = problem.drift_jacobian
    if drift_jacobian is None:
        return None
    identity = np.eye(problem.dim)

    def jacobian(y: np.ndarray) -> np.ndarray:
        return identity - scale * drift_jacobian(t_next, y)

    return jacobian


def theta_step(
    problem: SdeProblem,
    config: SolverConfig,
    t_n: float,
    y_n: np.ndarray,
    inc: StepIncrements,
) -> np.ndarray:
    """Advance one step of the stochastic theta method from ``(t_n, y_n)``."""
    y_n = np.asarray(y_n, dtype=float)
    jumps = jump_term(problem, t_n, y_n, inc.jumps, config.delta)
    return _theta_update(problem, config, t_n, y_n, np.asarray(inc.brownian), jumps)


def theta_residual(
    problem: SdeProblem,
    config: SolverConfig,
    t_n: float,
    y_n: np.ndarray,
    y_next: np.ndarray,
    inc: StepIncrements,
) -> float:
    """Norm of the theta-scheme equation evaluated at a candidate ``y_next``."""
    theta, delta = config.theta, config.delta
    noise = problem.diffusion(t_n, y_n) @ np.asarray(inc.brownian)
    rhs = (
        y_n
        + theta * problem.drift(t_n + delta, y_next) * delta
        + (1 - theta) * problem.drift(t_n, y_n) * delta
        + noise
        + jump_term(problem, t_n, y_n, inc.jumps, delta)
    )
    return float(np.linalg.norm(y_next - rhs))


def simulate_original_path(
    problem: SdeProblem,
    config: SolverConfig,
    increments: Sequence[StepIncrements],
    n_steps: int,
) -> DiscretePath:
    """Iterate ``theta_step`` from ``x0`` over the caller's increments."""
    if len(increments) < n_steps:
        raise GridMismatchError(f"{n_steps} steps requested but {len(increments)} increments given")
    config.check_problem(problem)
    values = np.empty((n_steps + 1, problem.dim))
    values[0] = problem.x0
    for n in range(n_steps):
        t_n = n * config.delta
        try:
            values[n + 1] = theta_step(problem, config, t_n, values[n], increments[n])
        except TcLevyExceptionError as e:
            e.add_note(f"while computing step {n} (t={t_n:g}) of {problem.name}")
            raise
    return DiscretePath(config.delta, values)


@dataclass(frozen=True)
class IncrementBatch:
    """Driving noise of several paths on one grid.

    ``brownian`` has shape ``(n_paths, n_steps, m)``. Jump ``i`` carries mark ``marks[i]``,
    belongs to path ``owners[i]`` and falls in step ``steps[i]``; ``steps`` is sorted.
    """

    brownian: np.ndarray = field(repr=False)
    steps: np.ndarray = field(repr=False)
    owners: np.ndarray = field(repr=False)
    marks: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.brownian.ndim != 3:
            raise ParameterDomainError("batched Brownian increments must be (paths, steps, m)")
        if not self.steps.shape == self.owners.shape == self.marks.shape[:1]:
            raise ParameterDomainError("jump steps, owners and marks must have equal length")
        if np.any(np.diff(self.steps) < 0):
            raise ParameterDomainError("jump steps must be sorted")

    @property
    def n_paths(self) -> int:
        return self.brownian.shape[0]

    @property
    def n_steps(self) -> int:
        return self.brownian.shape[1]


def simulate_terminal_batch(
    problem: SdeProblem,
    config: SolverConfig,
    batch: IncrementBatch,
    n_steps: np.ndarray,
) -> np.ndarray:
    """Values ``Y_{n_steps[p]}`` of every path of ``batch``, stepped together.

    Path ``p`` stops after its own ``n_steps[p]`` steps. With an analytic or vanishing
    compensator each row equals what ``simulate_original_path`` gives on the same increments.
    """
    n_steps = np.asarray(n_steps, dtype=int)
    if n_steps.shape != (batch.n_paths,):
        raise ParameterDomainError(f"need one step count per path, got shape {n_steps.shape}")
    if np.any(n_steps < 0) or np.any(n_steps > batch.n_steps):
        raise GridMismatchError(f"step counts must lie in [0, {batch.n_steps}]")
    config.check_problem(problem)
    y = np.broadcast_to(problem.x0, (batch.n_paths, problem.dim)).copy()
    bounds = np.searchsorted(batch.steps, np.arange(batch.n_steps + 1), side="left")
    for n in range(int(n_steps.max(initial=0))):
        t_n = n * config.delta
        live = n_steps > n
        total = np.zeros_like(y)
        lo, hi = bounds[n], bounds[n + 1]
        if hi > lo:
            owners = batch.owners[lo:hi]
            np.add.at(total, owners, problem.jump(t_n, y[owners], batch.marks[lo:hi]))
        y_live = y[live]
        jumps = total[live] - config.delta * problem.compensator_at(t_n, y_live)
        try:
            y[live] = _theta_update(
                problem, config, t_n, y_live, batch.brownian[live, n], jumps
            )
        except TcLevyExceptionError as e:
            e.add_note(f"while computing batched step {n} (t={t_n:g}) of {problem.name}")
            raise
    return y


def eval_piecewise(path: DiscretePath, t: float) -> np.ndarray:
    """Piecewise-constant path value ``Y_n`` for ``t`` in ``[t_n, t_{n+1})``."""
    if t < 0:
        raise ParameterDomainError(f"query time must be nonnegative, got {t}")
    n = math.floor(t / path.delta)
    if n > path.n_steps:
        raise GridMismatchError(f"query time {t} beyond last grid point {path.times[-1]}")
    return path.values[n]


def compose_time_changed(path: DiscretePath, itc: InverseTimeChange, t: float) -> np.ndarray:
    """Time-changed approximation ``X_delta(t) = Y_delta(E_delta(t))``."""
    _check_composable(path, itc)
    return path.values[itc.index_at(t)]


def time_changed_values(
    path: DiscretePath, itc: InverseTimeChange, times: np.ndarray
) -> np.ndarray:
    """Vectorized ``compose_time_changed`` over an array of query times."""
    _check_composable(path, itc)
    return path.values[itc.indices(times)]


def _check_composable(path: DiscretePath, itc: InverseTimeChange) -> None:
    if path.delta != itc.delta:
        raise GridMismatchError(
            f"path stepsize {path.delta} differs from time change stepsize {itc.delta}"
        )
    if path.n_steps < itc.n_index:
        raise GridMismatchError(
            f"path has {path.n_steps} steps but the time change reaches step {itc.n_index}"
        )


def simulate_ensemble(
    problem: SdeProblem,
    config: SolverConfig,
    stream: RandomStream,
    n_paths: int,
    n_steps: int,
) -> np.ndarray:
    """Advance ``n_paths`` independent paths ``n_steps`` steps on the natural clock.

    Returns the terminal states as an ``(n_paths, d)`` array.
    """
    require(n_paths >= 1, f"need at least one path, got {n_paths}")
    config.check_problem(problem)
    brownian_stream = stream.substream(StreamPurpose.BROWNIAN)
    count_stream = stream.substream(StreamPurpose.JUMP_TIMES)
    mark_stream = stream.substream(StreamPurpose.JUMP_MARKS)
    rate = problem.measure.total_mass * config.delta
    y = np.broadcast_to(problem.x0, (n_paths, problem.dim)).copy()
    for n in range(n_steps):
        t_n = n * config.delta
        dw = sample_gaussian_increments(brownian_stream, config.delta, problem.noise_dim, n_paths)
        jumps = -config.delta * problem.compensator_at(t_n, y)
        if rate > 0:
            counts = count_stream.generator.poisson(rate, n_paths)
            owners = np.repeat(np.arange(n_paths), counts)
            if owners.size:
                marks = problem.measure.sample_marks(mark_stream, owners.size)
                np.add.at(jumps, owners, problem.jump(t_n, y[owners], marks))
        try:
            y = _theta_update(problem, config, t_n, y, dw, jumps)
        except TcLevyExceptionError as e:
            e.add_note(f"while computing ensemble step {n} (t={t_n:g}) of {problem.name}")
            raise
    return y


def estimate_second_moment(
    problem: SdeProblem,
    config: SolverConfig,
    stream: RandomStream,
    n_paths: int,
    horizon: float,
) -> tuple[float, float]:
    """Monte Carlo ``E[|Y(horizon)|**2]`` and its standard error."""
    n_steps = round(horizon / config.delta)
    if not math.isclose(n_steps * config.delta, horizon):
        raise GridMismatchError(f"horizon {horizon} is not a multiple of delta {config.delta}")
    terminal = simulate_ensemble(problem, config, stream, n_paths, n_steps)
    squares = np.sum(terminal**2, axis=-1)
    return float(squares.mean()), float(squares.std(ddof=1) / math.sqrt(n_paths))
