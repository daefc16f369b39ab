"""Tests for the stable subordinator and its discretized inverse."""

import math

import numpy as np
import pytest

from tclevy.helpers import GridMismatchError, ParameterDomainError
from tclevy.kernels import RandomStream, make_stream, sample_stable_increments
from tclevy.timechange import (
    INITIAL_BLOCK,
    SubordinatorPath,
    build_inverse,
    coarsen_path,
    eval_inverse,
    simulate_subordinator,
)


def brute_force_inverse(values: np.ndarray, delta: float, t: float) -> float:
    """``(min{n : D(t_n) > t} - 1) * delta`` by linear scan."""
    n = next(i for i, v in enumerate(values) if v > t)
    return (n - 1) * delta


class TestSubordinatorPath:
    horizon = 1.0

    def test_starts_at_zero_and_passes_horizon(self, stream: RandomStream) -> None:
        path = simulate_subordinator(stream, 0.9, 2**-8, self.horizon)
        assert path.values[0] == 0
        assert np.all(np.diff(path.values) >= 0)
        n = path.n_index
        assert path.values[n] <= self.horizon < path.values[n + 1]

    def test_deterministic(self) -> None:
        a = simulate_subordinator(make_stream(3, 9), 0.45, 2**-8, self.horizon)
        b = simulate_subordinator(make_stream(3, 9), 0.45, 2**-8, self.horizon)
        assert np.array_equal(a.values, b.values)

    def test_values_read_only(self, stream: RandomStream) -> None:
        path = simulate_subordinator(stream, 0.9, 2**-6, self.horizon)
        with pytest.raises(ValueError):
            path.values[0] = 1.0

    @pytest.mark.parametrize("pad", [2, 8, 64])
    def test_padding(self, stream: RandomStream, pad: int) -> None:
        """The stored step count is a multiple of the padding."""
        path = simulate_subordinator(stream, 0.9, 2**-10, self.horizon, pad_to_multiple=pad)
        assert (path.values.size - 1) % pad == 0
        assert path.values[path.n_index] <= self.horizon < path.values[path.n_index + 1]

    def test_values_are_cumulative_stable_draws(self) -> None:
        """The grid is the running sum of the stream's stable increments."""
        path = simulate_subordinator(make_stream(17, 0), 0.9, 2**-8, self.horizon)
        draws = sample_stable_increments(make_stream(17, 0), 0.9, 2**-8, INITIAL_BLOCK)
        expected = np.concatenate(([0.0], np.cumsum(draws)))
        size = min(path.values.size, expected.size)
        assert np.array_equal(path.values[:size], expected[:size])

    def test_laplace_at_unit_time(self, stream: RandomStream) -> None:
        """D(1), the sum of 256 increments of 2**-8, has Laplace transform exp(-1) at 1."""
        n_paths = 10_000
        draws = sample_stable_increments(stream, 0.9, 2**-8, n_paths * 256)
        weights = np.exp(-draws.reshape(n_paths, 256).sum(axis=1))
        stderr = weights.std(ddof=1) / math.sqrt(n_paths)
        assert abs(weights.mean() - math.exp(-1)) < 4 * stderr

    @pytest.mark.parametrize(
        ("alpha", "delta", "horizon"),
        [(0.0, 0.1, 1.0), (1.0, 0.1, 1.0), (0.5, 1.0, 1.0), (0.5, 0.1, 0.0)],
    )
    def test_rejects_domain(
        self, stream: RandomStream, alpha: float, delta: float, horizon: float
    ) -> None:
        with pytest.raises(ParameterDomainError):
            simulate_subordinator(stream, alpha, delta, horizon)

    def test_rejects_path_not_passing_horizon(self) -> None:
        with pytest.raises(ParameterDomainError):
            SubordinatorPath.from_values(0.5, 0.5, [0.0, 0.3, 0.9], 2.0)


class TestInverseTimeChange:
    """Hand-built path D = [0, 0.3, 0.9, 2.1] on delta = 0.5 with T = 2."""

    values = (0.0, 0.3, 0.9, 2.1)
    delta = 0.5
    horizon = 2.0

    @pytest.fixture
    def itc(self):
        path = SubordinatorPath.from_values(0.9, self.delta, list(self.values), self.horizon)
        return build_inverse(path)

    def test_hand_built(self, itc) -> None:
        assert itc.n_index == 2
        assert eval_inverse(itc, 1.0) == 1.0
        assert eval_inverse(itc, self.horizon) == 1.0

    def test_first_interval(self, itc) -> None:
        assert eval_inverse(itc, 0.0) == 0.0
        assert eval_inverse(itc, 0.29) == 0.0

    def test_breakpoint_belongs_to_right_interval(self, itc) -> None:
        assert eval_inverse(itc, 0.3) == 0.5
        assert eval_inverse(itc, 0.9) == 1.0

    @pytest.mark.parametrize("t", [-0.1, 2.0001])
    def test_outside_horizon(self, itc, t: float) -> None:
        with pytest.raises(ParameterDomainError):
            eval_inverse(itc, t)

    def test_staircase(self, itc) -> None:
        jumps, levels = itc.staircase()
        assert list(jumps) == [0.0, 0.3, 0.9]
        assert list(levels) == [0.0, 0.5, 1.0]


class TestSimulatedInverse:
    n_paths = 100

    def test_matches_brute_force(self) -> None:
        for p in range(self.n_paths):
            path = simulate_subordinator(make_stream(5, p), 0.7, 2**-6, 1.0)
            itc = build_inverse(path)
            times = np.linspace(0.0, 1.0, 37)
            expected = [brute_force_inverse(path.values, path.delta, t) for t in times]
            assert list(itc.evaluate(times)) == expected
            assert eval_inverse(itc, 1.0) == path.n_index * path.delta

    def test_monotone_with_unit_jumps(self, stream: RandomStream) -> None:
        path = simulate_subordinator(stream, 0.45, 2**-9, 1.0)
        itc = build_inverse(path)
        assert np.all(np.diff(itc.evaluate(np.linspace(0.0, 1.0, 5000))) >= 0)
        _, levels = itc.staircase()
        assert np.allclose(np.diff(levels), path.delta)

    def test_sandwich_against_finer_grid(self) -> None:
        """E_delta(t) <= E_fine(t) + fine_delta and E_fine(t) - delta <= E_delta(t)."""
        factor = 64
        fine_delta = 2**-12
        delta = fine_delta * factor
        times = np.linspace(0.0, 1.0, 301)
        for p in range(self.n_paths):
            fine = simulate_subordinator(
                make_stream(8, p), 0.9, fine_delta, 1.0, pad_to_multiple=factor
            )
            coarse = coarsen_path(fine, factor)
            e_fine = build_inverse(fine).evaluate(times)
            e_coarse = build_inverse(coarse).evaluate(times)
            assert np.all(e_coarse <= e_fine + fine_delta)
            assert np.all(e_fine - delta <= e_coarse)

    def test_mean_against_inverse_stable_law(self) -> None:
        """E[E(1)] = 1 / Gamma(1 + alpha), and E_delta sits within delta below E."""
        alpha = 0.9
        delta = 2**-8
        paths = [simulate_subordinator(make_stream(13, p), alpha, delta, 1.0) for p in range(2000)]
        samples = np.array([build_inverse(path).n_index * delta for path in paths])
        stderr = samples.std(ddof=1) / math.sqrt(samples.size)
        exact = 1 / math.gamma(1 + alpha)
        assert exact - delta - 4 * stderr <= samples.mean() <= exact + 4 * stderr


class TestCoarsenPath:
    def test_identity(self, stream: RandomStream) -> None:
        path = simulate_subordinator(stream, 0.9, 2**-8, 1.0)
        assert coarsen_path(path, 1) is path

    def test_subsampling(self) -> None:
        path = SubordinatorPath.from_values(0.5, 0.25, [0.0, 0.2, 0.5, 0.9, 1.4], 1.0)
        coarse = coarsen_path(path, 2)
        assert list(coarse.values) == [0.0, 0.5, 1.4]
        assert coarse.delta == 0.5
        assert coarse.horizon == 1.0
        assert coarse.n_index == 1

    def test_rejects_non_power_of_two(self) -> None:
        path = SubordinatorPath.from_values(0.5, 0.1, [0.0, 0.2, 0.5, 0.9, 1.2, 1.4, 1.9], 1.0)
        with pytest.raises(GridMismatchError):
            coarsen_path(path, 3)

    def test_rejects_undivided_grid(self) -> None:
        path = SubordinatorPath.from_values(0.5, 0.1, [0.0, 0.2, 0.5, 1.2], 1.0)
        with pytest.raises(GridMismatchError):
            coarsen_path(path, 2)

    def test_agrees_with_brute_force(self) -> None:
        for p in range(20):
            fine = simulate_subordinator(make_stream(21, p), 0.6, 2**-9, 1.0, pad_to_multiple=8)
            coarse = coarsen_path(fine, 8)
            itc = build_inverse(coarse)
            for t in np.linspace(0.0, 1.0, 41):
                assert eval_inverse(itc, t) == brute_force_inverse(coarse.values, coarse.delta, t)
