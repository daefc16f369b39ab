"""Command line front end."""

import logging
import sys
from collections.abc import Sequence

from tclevy import export
from tclevy.config import RunConfig, parse_config
from tclevy.harness import (
    ErrorTable,
    functional_from_name,
    sample_time_changed_path,
    strong_error_experiment,
    weak_error_experiment,
)
from tclevy.helpers import Command, ConfigError, StreamPurpose, TcLevyExceptionError
from tclevy.kernels import RandomStream, make_stream
from tclevy.problems import problem_from_name
from tclevy.timechange import build_inverse, simulate_subordinator

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3


def _subordinator_stream(config: RunConfig) -> RandomStream:
    return make_stream(config.seed, 0).substream(StreamPurpose.SUBORDINATOR)


def _run_subordinator(config: RunConfig) -> str:
    path = simulate_subordinator(
        _subordinator_stream(config), config.alpha, config.delta, config.horizon
    )
    export.write_frame(export.subordinator_frame(path), config.out)
    return f"subordinator passed T={config.horizon:g} after {path.n_index + 1} steps"


def _run_inverse(config: RunConfig) -> str:
    path = simulate_subordinator(
        _subordinator_stream(config), config.alpha, config.delta, config.horizon
    )
    itc = build_inverse(path)
    export.write_frame(export.inverse_frame(itc, config.resolution), config.out)
    return f"E_delta(T) = {itc.n_index * itc.delta:g}"


def _run_path(config: RunConfig) -> str:
    problem = problem_from_name(config.problem)
    sample = sample_time_changed_path(
        problem, config.solver_config(), config.alpha, config.horizon, config.seed
    )
    original = export.original_path_frame(sample.path)
    changed = export.time_changed_frame(sample.path, sample.inverse, config.resolution)
    export.write_frame(original, f"{config.out}.original.csv")
    export.write_frame(changed, config.out)
    terminal = sample.path.values[sample.inverse.n_index]
    return f"X_delta(T) = {terminal.tolist()}"


def _order_summary(table: ErrorTable) -> str:
    if table.slope is None:
        return f"{table.kind} order: too few positive errors to fit ({table.label})"
    summary = f"{table.kind} order slope {table.slope:.4f}"
    if table.slope_interval is not None:
        lo, hi = table.slope_interval
        summary += f" (95% interval {lo:.4f}..{hi:.4f})"
    return f"{summary} ({table.label}, {table.n_paths} paths)"


def _run_strong(config: RunConfig) -> str:
    ref_delta = config.ref_delta
    if ref_delta is None:
        raise ConfigError("strong-order needs --ref-exp")
    table = strong_error_experiment(
        problem_from_name(config.problem),
        config.theta,
        config.alpha,
        config.deltas,
        ref_delta,
        config.n_paths,
        config.horizon,
        config.seed,
        config.threads,
        config.newton_tolerance,
    )
    export.write_error_table(table, config.out)
    return _order_summary(table)


def _run_weak(config: RunConfig) -> str:
    ref_delta = config.ref_delta
    if ref_delta is None:
        raise ConfigError("weak-order needs --ref-exp")
    table = weak_error_experiment(
        problem_from_name(config.problem),
        functional_from_name(config.phi),
        config.alpha,
        config.deltas,
        ref_delta,
        config.n_paths,
        config.horizon,
        config.seed,
        config.threads,
    )
    export.write_error_table(table, config.out)
    return _order_summary(table)


HANDLERS = {
    Command.SUBORDINATOR: _run_subordinator,
    Command.INVERSE: _run_inverse,
    Command.PATH: _run_path,
    Command.STRONG_ORDER: _run_strong,
    Command.WEAK_ORDER: _run_weak,
}


def run(config: RunConfig) -> int:
    """Dispatch one command, write its outputs and print a one-line summary."""
    logger.info("Running %s", config.command.flag)
    summary = HANDLERS[config.command](config)
    sys.stdout.write(summary + "\n")
    return EXIT_OK


def _origin(error: BaseException) -> str:
    """Innermost package module that raised ``error``, not counting the shared helpers."""
    origin = __name__
    tb = error.__traceback__
    while tb is not None:
        module = tb.tb_frame.f_globals.get("__name__", origin)
        if module.startswith("tclevy.") and module != "tclevy.helpers":
            origin = module
        tb = tb.tb_next
    return origin


def describe_error(error: BaseException) -> str:
    """Module-qualified one-line message, with any attached notes."""
    message = f"{_origin(error)}: {error}"
    notes = getattr(error, "__notes__", [])
    if notes:
        message += " (" + "; ".join(notes) + ")"
    return message


def main(argv: Sequence[str] | None = None) -> int:
    """Entry point of ``tclevy`` and ``python -m tclevy``."""
    try:
        config = parse_config(argv)
        logging.basicConfig(
            level=config.log_level, format="%(asctime)s %(name)s %(levelname)s: %(message)s"
        )
        return run(config)
    except ConfigError as e:
        sys.stderr.write(f"tclevy: {describe_error(e)}\n")
        return EXIT_USAGE
    except (TcLevyExceptionError, OSError) as e:
        sys.stderr.write(f"tclevy: {describe_error(e)}\n")
        return EXIT_FAILURE
