"""Tests for coupled noise, error tables, order fits and the convergence experiments."""

import itertools
import math

import numpy as np
import pytest

from tclevy.harness import (
    ErrorRow,
    ErrorTable,
    StrongErrorExperiment,
    WeakErrorExperiment,
    aggregate_noise,
    batch_noise,
    bootstrap_slope_interval,
    fit_order,
    functional_from_name,
    generate_coupled_noise,
    sample_time_changed_path,
    strong_error_experiment,
    weak_error_experiment,
)
from tclevy.helpers import (
    ConfigError,
    GridMismatchError,
    ParameterDomainError,
    ResourceCapError,
    StreamPurpose,
    WellPosednessError,
    dyadic,
)
from tclevy.kernels import LevyMeasureSpec, RandomStream, make_stream
from tclevy.problems import SdeProblem
from tclevy.solver import SolverConfig, compose_time_changed


def power_law_table(deltas, errors, kind: str = "strong", samples=None) -> ErrorTable:
    return ErrorTable.from_rows(
        [(d, e, 0.0) for d, e in zip(deltas, errors, strict=True)],
        kind=kind,
        theta=0.5,
        alpha=0.9,
        ref_delta=dyadic(12),
        n_paths=10 if samples is None else samples.shape[0],
        seed=0,
        samples=samples,
    )


class TestCoupledNoise:
    measure = LevyMeasureSpec.gaussian()

    def test_shapes(self, stream: RandomStream) -> None:
        noise = generate_coupled_noise(stream, dyadic(6), 2.0, self.measure, 3)
        assert noise.brownian.shape == (128, 3)
        assert noise.n_fine == 128
        assert noise.jump_times.shape == noise.jump_marks.shape

    def test_total_displacement_variance(self) -> None:
        totals = np.array(
            [
                generate_coupled_noise(make_stream(2, p), dyadic(10), 1.0, self.measure, 1)
                .brownian.sum()
                for p in range(1000)
            ]
        )
        # standard error of a Gaussian sample variance
        assert abs(totals.var(ddof=1) - 1.0) < 3 * math.sqrt(2 / 999)

    def test_jump_count(self) -> None:
        counts = np.array(
            [
                generate_coupled_noise(make_stream(3, p), 0.5, 1.0, self.measure, 1).jump_times.size
                for p in range(10_000)
            ]
        )
        assert abs(counts.mean() - 2.0) < 3 * math.sqrt(2.0 / 10_000)

    def test_brownian_from_its_own_substream(self) -> None:
        """Jump draws never shift the Brownian increments."""
        with_jumps = generate_coupled_noise(make_stream(5, 1), 0.25, 1.0, self.measure, 1)
        without = generate_coupled_noise(make_stream(5, 1), 0.25, 1.0, LevyMeasureSpec.none(), 1)
        assert np.array_equal(with_jumps.brownian, without.brownian)
        assert without.jump_times.size == 0

    def test_horizon_off_grid(self, stream: RandomStream) -> None:
        with pytest.raises(GridMismatchError):
            generate_coupled_noise(stream, 0.3, 1.0, self.measure, 1)

    def test_resource_cap(self, stream: RandomStream) -> None:
        with pytest.raises(ResourceCapError):
            generate_coupled_noise(stream, dyadic(30), 1.0, self.measure, 1)


class TestAggregateNoise:
    measure = LevyMeasureSpec.uniform(20.0, 1.0)

    @pytest.fixture
    def noise(self, stream: RandomStream):
        return generate_coupled_noise(stream, dyadic(8), 1.0, self.measure, 2)

    def test_unit_factor_is_identity(self, noise) -> None:
        increments = aggregate_noise(noise, noise.fine_delta)
        assert len(increments) == noise.n_fine
        assert np.array_equal(np.stack([inc.brownian for inc in increments]), noise.brownian)

    @pytest.mark.parametrize("factor", [1, 2, 8, 64])
    def test_totals_preserved(self, noise, factor: int) -> None:
        increments = aggregate_noise(noise, factor * noise.fine_delta)
        assert len(increments) == noise.n_fine // factor
        brownian = np.stack([inc.brownian for inc in increments])
        assert np.allclose(brownian.sum(axis=0), noise.brownian.sum(axis=0))
        marks = np.concatenate([inc.jumps.marks for inc in increments])
        assert np.array_equal(marks, noise.jump_marks)

    @pytest.mark.parametrize("factor", [4, 32])
    def test_jump_offsets_inside_window(self, noise, factor: int) -> None:
        coarse = factor * noise.fine_delta
        increments = aggregate_noise(noise, coarse)
        times = noise.jump_times
        for n, inc in enumerate(increments):
            offsets = inc.jumps.offsets
            assert np.all((offsets >= 0) & (offsets < coarse))
            window = times[(times >= n * coarse) & (times < (n + 1) * coarse)]
            assert np.allclose(n * coarse + offsets, window)

    def test_rejects_non_multiple(self, noise) -> None:
        with pytest.raises(GridMismatchError):
            aggregate_noise(noise, 3.5 * noise.fine_delta)

    def test_rejects_undivided_horizon(self, noise) -> None:
        with pytest.raises(GridMismatchError):
            aggregate_noise(noise, 512 * noise.fine_delta)


class TestBatchNoise:
    measure = LevyMeasureSpec.uniform(20.0, 1.0)

    @pytest.fixture
    def noises(self):
        return [
            generate_coupled_noise(make_stream(4, p), dyadic(8), horizon, self.measure, 2)
            for p, horizon in enumerate((1.0, 0.5))
        ]

    @pytest.mark.parametrize("factor", [1, 4])
    def test_matches_aggregate_noise(self, noises, factor: int) -> None:
        coarse = factor * dyadic(8)
        width = 256 // factor
        batch = batch_noise(noises, coarse, width)
        assert batch.brownian.shape == (2, width, 2)
        for p, noise in enumerate(noises):
            increments = aggregate_noise(noise, coarse)
            stacked = np.stack([inc.brownian for inc in increments])
            assert np.array_equal(batch.brownian[p, : len(increments)], stacked)
            for n, inc in enumerate(increments):
                mine = (batch.owners == p) & (batch.steps == n)
                assert np.array_equal(batch.marks[mine], inc.jumps.marks)

    def test_short_paths_padded(self, noises) -> None:
        batch = batch_noise(noises, dyadic(8), 256)
        assert np.all(batch.brownian[1, 128:] == 0)
        assert np.all(batch.steps[batch.owners == 1] < 128)

    def test_truncates_to_width(self, noises) -> None:
        batch = batch_noise(noises, dyadic(8), 10)
        assert batch.brownian.shape == (2, 10, 2)
        assert np.all(batch.steps < 10)
        assert np.all(np.diff(batch.steps) >= 0)


class TestErrorTable:
    def test_rows_sorted_coarsest_first(self) -> None:
        table = power_law_table([dyadic(8), dyadic(6), dyadic(7)], [0.1, 0.3, 0.2])
        assert list(table.deltas) == [dyadic(6), dyadic(7), dyadic(8)]
        assert list(table.errors) == [0.3, 0.2, 0.1]

    def test_samples_follow_row_order(self) -> None:
        samples = np.array([[1.0, 3.0, 2.0], [1.0, 3.0, 2.0]])
        table = power_law_table(
            [dyadic(8), dyadic(6), dyadic(7)], [0.1, 0.3, 0.2], samples=samples
        )
        assert table.samples.tolist() == [[3.0, 2.0, 1.0], [3.0, 2.0, 1.0]]

    def test_rejects_unsorted_rows(self) -> None:
        with pytest.raises(ParameterDomainError):
            ErrorTable(
                "strong", 0.0, 0.9, (ErrorRow(0.1, 1.0, 0.0), ErrorRow(0.2, 2.0, 0.0)), 0.01, 5, 0
            )

    def test_rejects_negative_error(self) -> None:
        with pytest.raises(ParameterDomainError):
            power_law_table([0.5, 0.25], [1.0, -1.0])

    def test_rejects_unknown_kind(self) -> None:
        with pytest.raises(ParameterDomainError):
            power_law_table([0.5, 0.25], [1.0, 0.5], kind="mean-square")

    def test_label(self) -> None:
        assert power_law_table([0.5], [1.0]).label == "theta=0.5, alpha=0.9"


class TestFitOrder:
    def test_two_points(self) -> None:
        slope, _ = fit_order(power_law_table([dyadic(6), dyadic(8)], [0.125, 0.0625]))
        assert slope == pytest.approx(0.5, abs=1e-12)

    def test_exact_first_order(self) -> None:
        deltas = [dyadic(6), dyadic(7), dyadic(8)]
        slope, intercept = fit_order(power_law_table(deltas, [3 * d for d in deltas]))
        assert slope == pytest.approx(1.0, abs=1e-12)
        assert intercept == pytest.approx(math.log2(3), abs=1e-12)

    def test_noisy_half_order(self) -> None:
        deltas = [dyadic(k) for k in range(6, 10)]
        noise = np.exp(np.random.default_rng(1).normal(0.0, 0.01, len(deltas)))
        slope, _ = fit_order(power_law_table(deltas, np.sqrt(deltas) * noise))
        assert 0.45 <= slope <= 0.55

    def test_zero_rows_dropped(self) -> None:
        slope, _ = fit_order(power_law_table([0.5, 0.25, 0.125], [1.0, 0.5, 0.0]))
        assert slope == pytest.approx(1.0)

    def test_needs_two_positive_rows(self) -> None:
        with pytest.raises(ParameterDomainError):
            fit_order(power_law_table([0.5, 0.25], [1.0, 0.0]))


class TestBootstrap:
    deltas = (dyadic(6), dyadic(7), dyadic(8))

    def test_common_path_factor_fixes_slope(self, stream: RandomStream) -> None:
        """Squared errors w_p * delta give RMS slope 1/2 under every resample."""
        weights = np.random.default_rng(2).exponential(1.0, 200)
        samples = weights[:, np.newaxis] * np.array(self.deltas)
        table = power_law_table(self.deltas, np.sqrt(samples.mean(axis=0)), samples=samples)
        lo, hi = bootstrap_slope_interval(table, stream, resamples=200)
        assert lo == pytest.approx(0.5, abs=1e-9)
        assert hi == pytest.approx(0.5, abs=1e-9)

    def test_interval_ordered_and_reproducible(self) -> None:
        rng = np.random.default_rng(3)
        samples = rng.exponential(1.0, (300, 3)) * np.array(self.deltas)
        table = power_law_table(self.deltas, np.sqrt(samples.mean(axis=0)), samples=samples)
        first = bootstrap_slope_interval(table, make_stream(1, 0).substream(StreamPurpose.CHECKS))
        second = bootstrap_slope_interval(table, make_stream(1, 0).substream(StreamPurpose.CHECKS))
        assert first == second
        assert first[0] <= first[1]

    def test_needs_samples(self, stream: RandomStream) -> None:
        with pytest.raises(ParameterDomainError):
            bootstrap_slope_interval(power_law_table(self.deltas, [0.3, 0.2, 0.1]), stream)


class TestFunctionals:
    states = np.array([[1.0, 5.0], [-2.0, 5.0], [0.5, 5.0]])

    @pytest.mark.parametrize(
        ("name", "expected"),
        [
            ("identity", [1.0, -2.0, 0.5]),
            ("square", [1.0, 4.0, 0.25]),
            ("cube", [1.0, -8.0, 0.125]),
            ("affine:2,1", [3.0, -3.0, 2.0]),
        ],
    )
    def test_named(self, name: str, expected: list[float]) -> None:
        assert functional_from_name(name)(self.states) == pytest.approx(expected)

    def test_sin(self) -> None:
        assert functional_from_name("sin")(self.states) == pytest.approx(np.sin([1.0, -2.0, 0.5]))

    @pytest.mark.parametrize("name", ["exp", "affine:1", "affine:x,y"])
    def test_unknown(self, name: str) -> None:
        with pytest.raises(ConfigError):
            functional_from_name(name)


class TestExperimentSetup:
    def test_off_ladder_stepsize(self, paper_problem: SdeProblem) -> None:
        with pytest.raises(GridMismatchError):
            StrongErrorExperiment(paper_problem, 0.5, 0.9, [3 * dyadic(7)], dyadic(7), 10, 1.0, 0)

    def test_duplicate_stepsizes(self, paper_problem: SdeProblem) -> None:
        with pytest.raises(ParameterDomainError):
            StrongErrorExperiment(
                paper_problem, 0.5, 0.9, [dyadic(4), dyadic(4)], dyadic(7), 10, 1.0, 0
            )

    def test_guard_before_simulation(self, paper_problem: SdeProblem) -> None:
        with pytest.raises(WellPosednessError):
            StrongErrorExperiment(paper_problem, 1.0, 0.9, [0.5, 0.25], dyadic(5), 10, 1.0, 0)

    def test_needs_two_paths(self, paper_problem: SdeProblem) -> None:
        with pytest.raises(ParameterDomainError):
            StrongErrorExperiment(paper_problem, 0.5, 0.9, [dyadic(4)], dyadic(7), 1, 1.0, 0)

    def test_weak_runs_euler_maruyama(self, paper_problem: SdeProblem) -> None:
        experiment = WeakErrorExperiment(
            paper_problem, functional_from_name("identity"), 0.9, [dyadic(4)], dyadic(6), 10, 1.0, 0
        )
        assert experiment.config.theta == 0.0


class TestStrongExperiment:
    """Small ladders on the worked example."""

    deltas = (dyadic(3), dyadic(4), dyadic(5))
    ref_delta = dyadic(7)
    n_paths = 40

    def run(self, problem: SdeProblem, threads: int = 1, seed: int = 11):
        return strong_error_experiment(
            problem, 0.5, 0.9, self.deltas, self.ref_delta, self.n_paths, 1.0, seed, threads
        )

    def test_self_comparison_is_exact(self, paper_problem: SdeProblem) -> None:
        """A ladder holding only the reference stepsize has zero error."""
        table = strong_error_experiment(
            paper_problem, 0.5, 0.9, [self.ref_delta], self.ref_delta, 10, 1.0, 0
        )
        assert list(table.errors) == [0.0]
        assert table.slope is None

    def test_rows_and_metadata(self, paper_problem: SdeProblem) -> None:
        table = self.run(paper_problem)
        assert table.kind == "strong"
        assert list(table.deltas) == list(self.deltas)
        assert table.ref_delta == self.ref_delta
        assert table.n_paths == self.n_paths
        assert table.samples.shape == (self.n_paths, len(self.deltas))
        assert np.all(table.errors > 0)
        assert table.slope is not None
        assert table.slope_interval is not None

    def test_deterministic(self, paper_problem: SdeProblem) -> None:
        first = self.run(paper_problem)
        second = self.run(paper_problem)
        assert first == second
        assert np.array_equal(first.samples, second.samples)

    def test_threads_do_not_change_results(self, paper_problem: SdeProblem) -> None:
        serial = self.run(paper_problem, threads=1)
        parallel = self.run(paper_problem, threads=4)
        assert serial == parallel

    def test_seed_matters(self, paper_problem: SdeProblem) -> None:
        first = self.run(paper_problem, seed=1)
        assert first.errors[0] != self.run(paper_problem, seed=2).errors[0]

    def test_refinement_lowers_error(self, paper_problem: SdeProblem) -> None:
        """Errors do not grow as delta shrinks, up to one standard error."""
        table = self.run(paper_problem)
        for coarse, fine in itertools.pairwise(table.rows):
            assert fine.error <= coarse.error + fine.stderr

    def test_batched_paths_match_single_paths(self, paper_problem: SdeProblem) -> None:
        experiment = StrongErrorExperiment(
            paper_problem, 1.0, 0.45, self.deltas, self.ref_delta, 5, 1.0, 13
        )
        batched = experiment.simulate_paths(range(5))
        assert batched.shape == (5, len(self.deltas) + 1, 1)
        for p in range(5):
            assert np.array_equal(batched[p], experiment.simulate_path(p))

    def test_reference_row_matches_direct_simulation(self, paper_problem: SdeProblem) -> None:
        """The reference solution of path p is the plain time-changed path on that path's noise."""
        experiment = StrongErrorExperiment(
            paper_problem, 0.5, 0.9, [self.ref_delta], self.ref_delta, 2, 1.0, 21
        )
        terminals = experiment.simulate_path(1)
        sample = sample_time_changed_path(
            paper_problem, SolverConfig(0.5, self.ref_delta), 0.9, 1.0, 21, stream_id=1
        )
        direct = compose_time_changed(sample.path, sample.inverse, 1.0)
        assert np.array_equal(terminals[-1], direct)


class TestWeakExperiment:
    deltas = (dyadic(3), dyadic(4), dyadic(5))
    ref_delta = dyadic(7)

    def test_constant_functional_has_no_error(self, paper_problem: SdeProblem) -> None:
        table = weak_error_experiment(
            paper_problem,
            lambda x: np.ones(x.shape[:-1]),
            0.9,
            self.deltas,
            self.ref_delta,
            20,
            1.0,
            0,
        )
        assert np.all(table.errors == 0)
        assert table.slope is None

    def test_affine_scales_errors(self, paper_problem: SdeProblem) -> None:
        """Phi = a x + b multiplies every weak error by |a|."""
        identity = weak_error_experiment(
            paper_problem, functional_from_name("identity"), 0.9, self.deltas, self.ref_delta,
            30, 1.0, 5,
        )
        affine = weak_error_experiment(
            paper_problem, functional_from_name("affine:-3,7"), 0.9, self.deltas, self.ref_delta,
            30, 1.0, 5,
        )
        assert affine.kind == "weak"
        assert np.allclose(affine.errors, 3 * identity.errors, rtol=1e-9)


class TestTimeChangedSample:
    def test_path_covers_time_change(self, paper_problem: SdeProblem) -> None:
        sample = sample_time_changed_path(paper_problem, SolverConfig(0.5, dyadic(7)), 0.6, 1.0, 3)
        assert sample.path.n_steps >= sample.inverse.n_index
        assert sample.path.delta == sample.inverse.delta
        assert np.array_equal(sample.path.values[0], paper_problem.x0)

    def test_deterministic(self, paper_problem: SdeProblem) -> None:
        config = SolverConfig(0.0, dyadic(6))
        first = sample_time_changed_path(paper_problem, config, 0.9, 1.0, 8)
        second = sample_time_changed_path(paper_problem, config, 0.9, 1.0, 8)
        assert np.array_equal(first.path.values, second.path.values)
        assert np.array_equal(first.subordinator.values, second.subordinator.values)


@pytest.mark.slow
class TestDeskScaleOrders:
    """Desk-scale convergence runs of the worked example."""

    @pytest.mark.parametrize("alpha", [0.45, 0.9])
    @pytest.mark.parametrize("theta", [0.0, 0.5, 1.0])
    def test_strong_order_half(self, paper_problem: SdeProblem, theta: float, alpha: float) -> None:
        table = strong_error_experiment(
            paper_problem,
            theta,
            alpha,
            [dyadic(k) for k in (6, 7, 8, 9)],
            dyadic(12),
            2000,
            1.0,
            0,
            threads=4,
        )
        assert 0.35 <= table.slope <= 0.65
        lo, hi = table.slope_interval
        assert lo <= 0.5 <= hi
        for coarse, fine in itertools.pairwise(table.rows):
            assert fine.error <= coarse.error + fine.stderr

    def test_weak_order_one(self, paper_problem: SdeProblem) -> None:
        table = weak_error_experiment(
            paper_problem,
            functional_from_name("identity"),
            0.9,
            [dyadic(k) for k in (6, 7, 8)],
            dyadic(12),
            10_000,
            1.0,
            0,
            threads=4,
        )
        assert 0.7 <= table.slope <= 1.3
