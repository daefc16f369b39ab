"""Run configuration: defaults, presets, config files and command line flags."""

import argparse
import logging
import os
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any, NoReturn

import strictyaml
from path import Path
from strictyaml import CommaSeparated, Enum, Float, Int, Map, Optional, Str

from tclevy.helpers import Command, ConfigError, dyadic, require
from tclevy.problems import problem_from_name
from tclevy.solver import SolverConfig

logger = logging.getLogger(__name__)

SEED_ENV = "TCLEVY_SEED"
ORDER_COMMANDS = (Command.STRONG_ORDER, Command.WEAK_ORDER)

# single stepsize of the plotting commands, as a power-of-two exponent
FIGURE_DELTA_EXPS = {
    Command.SUBORDINATOR: (8,),
    Command.INVERSE: (9,),
    Command.PATH: (9,),
}

PRESETS: dict[str, dict[Command, dict[str, Any]]] = {
    "paper": {
        Command.STRONG_ORDER: {"delta_exps": (13, 14, 15), "ref_exp": 16, "paths": 5000},
        Command.WEAK_ORDER: {"delta_exps": (8, 9, 10), "ref_exp": 12, "paths": 10000},
    },
    "desk": {
        Command.STRONG_ORDER: {"delta_exps": (6, 7, 8, 9), "ref_exp": 12, "paths": 2000},
        Command.WEAK_ORDER: {"delta_exps": (6, 7, 8), "ref_exp": 12, "paths": 10000},
    },
}

DEFAULTS: dict[str, Any] = {
    "problem": "paper-example",
    "theta": 0.0,
    "horizon": 1.0,
    "seed": 0,
    "threads": 1,
    "phi": "identity",
    "resolution": 1001,
    "newton_tol": 1e-5,
    "log_level": logging.INFO,
}

CONFIG_SCHEMA = Map(
    {
        Optional("command"): Enum([c.flag for c in Command]),
        Optional("problem"): Str(),
        Optional("alpha"): Float(),
        Optional("theta"): Float(),
        Optional("delta-exp"): CommaSeparated(Int()),
        Optional("ref-exp"): Int(),
        Optional("paths"): Int(),
        Optional("horizon"): Float(),
        Optional("seed"): Int(),
        Optional("out"): Str(),
        Optional("threads"): Int(),
        Optional("preset"): Enum(list(PRESETS)),
        Optional("phi"): Str(),
        Optional("resolution"): Int(),
        Optional("newton-tol"): Float(),
    }
)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved settings of one CLI invocation.

    Stepsizes are kept as exponents, so ``delta_exps=(6, 7)`` means 2**-6 and 2**-7.
    """

    command: Command
    problem: str
    alpha: float
    theta: float
    delta_exps: tuple[int, ...]
    ref_exp: int | None
    n_paths: int
    horizon: float
    seed: int
    out: Path
    threads: int = 1
    phi: str = "identity"
    resolution: int = 1001
    newton_tolerance: float = 1e-5
    log_level: int = field(default=logging.INFO, compare=False)

    def __post_init__(self) -> None:
        require(0 < self.alpha < 1, f"alpha must lie in (0, 1), got {self.alpha}")
        require(0 <= self.theta <= 1, f"theta must lie in [0, 1], got {self.theta}")
        require(len(self.delta_exps) >= 1, "need at least one stepsize")
        require(
            all(e >= 1 for e in self.delta_exps),
            f"stepsize exponents must be at least 1, got {self.delta_exps}",
        )
        require(self.horizon > 0, f"horizon must be positive, got {self.horizon}")
        require(0 <= self.seed < 2**64, f"seed must be a 64-bit unsigned integer, got {self.seed}")
        require(self.threads >= 1, f"threads must be positive, got {self.threads}")
        require(self.resolution >= 2, f"resolution must be at least 2, got {self.resolution}")
        require(self.newton_tolerance > 0, "Newton tolerance must be positive")
        if self.command in ORDER_COMMANDS:
            require(self.ref_exp is not None, "order experiments need a reference stepsize")
            require(
                self.ref_exp is not None and self.ref_exp >= max(self.delta_exps),
                f"reference exponent {self.ref_exp} must be at least {max(self.delta_exps)}",
            )
            require(self.n_paths >= 2, f"need at least two paths, got {self.n_paths}")
        else:
            require(len(self.delta_exps) == 1, f"{self.command.flag} takes a single stepsize")
        if self.command is Command.WEAK_ORDER:
            require(self.theta == 0, "weak-order runs Euler-Maruyama and needs theta=0")

    @property
    def deltas(self) -> tuple[float, ...]:
        """Stepsizes, coarsest first."""
        return tuple(dyadic(e) for e in sorted(self.delta_exps))

    @property
    def delta(self) -> float:
        """The coarsest (for plotting commands, the only) stepsize."""
        return self.deltas[0]

    @property
    def ref_delta(self) -> float | None:
        """Reference stepsize of order experiments."""
        return None if self.ref_exp is None else dyadic(self.ref_exp)

    def solver_config(self) -> SolverConfig:
        """Theta-method settings at the coarsest stepsize."""
        return SolverConfig(self.theta, self.delta, self.newton_tolerance)


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> NoReturn:
        raise ConfigError(message)


def _exponents(text: str) -> list[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid exponent list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    """Command line parser; usage errors raise ConfigError."""
    parser = _Parser(
        prog="tclevy",
        description="Simulate time-changed Levy SDEs and measure convergence orders.",
    )
    commands = [c.flag for c in Command]
    parser.add_argument("command", nargs="?", choices=commands, help="what to run")
    parser.add_argument("--command", dest="command_flag", choices=commands)
    parser.add_argument("--problem", help="'paper-example' or 'linear:a,b,s'")
    parser.add_argument("--alpha", type=float, help="stability index of the subordinator")
    parser.add_argument("--theta", type=float, help="implicitness of the drift, in [0, 1]")
    parser.add_argument(
        "--delta-exp",
        type=_exponents,
        action="append",
        help="stepsize 2**-k; repeat or comma-separate for a ladder",
    )
    parser.add_argument("--ref-exp", type=int, help="reference stepsize 2**-k")
    parser.add_argument("--paths", type=int, help="Monte Carlo path count")
    parser.add_argument("--horizon", type=float, help="time horizon T")
    parser.add_argument("--seed", type=int, help=f"master seed (fallback: ${SEED_ENV})")
    parser.add_argument("--out", help="output CSV file")
    parser.add_argument("--threads", type=int, help="worker threads for path simulation")
    parser.add_argument("--preset", choices=list(PRESETS))
    parser.add_argument("--config", help="flat 'key: value' config file")
    parser.add_argument("--phi", help="weak functional: identity, square, cube, sin, affine:a,b")
    parser.add_argument("--resolution", type=int, help="query points of path and inverse dumps")
    parser.add_argument("--newton-tol", type=float)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument(
        "--verbose", dest="log_level", action="store_const", const=logging.DEBUG
    )
    verbosity.add_argument(
        "--quiet", dest="log_level", action="store_const", const=logging.WARNING
    )
    return parser


def load_config_file(config_file: str | Path) -> dict[str, Any]:
    """Read a flat config file into flag-named settings."""
    config_file = Path(config_file)
    try:
        text = config_file.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config file {config_file}: {e}") from e
    try:
        data = strictyaml.load(text, CONFIG_SCHEMA).data if text.strip() else {}
    except strictyaml.StrictYAMLError as e:
        raise ConfigError(f"Invalid config file {config_file}: {e}") from e
    settings = {key.replace("-", "_"): value for key, value in data.items()}
    if "delta_exp" in settings:
        settings["delta_exps"] = tuple(settings.pop("delta_exp"))
    return settings


def _flag_settings(args: argparse.Namespace) -> dict[str, Any]:
    settings = {
        key: value
        for key, value in vars(args).items()
        if value is not None and key not in {"command", "command_flag", "delta_exp", "config"}
    }
    if args.delta_exp:
        settings["delta_exps"] = tuple(e for group in args.delta_exp for e in group)
    return settings


def _resolve_command(args: argparse.Namespace, file_settings: dict[str, Any]) -> Command:
    if args.command and args.command_flag and args.command != args.command_flag:
        raise ConfigError(f"conflicting commands {args.command!r} and {args.command_flag!r}")
    flag = args.command or args.command_flag or file_settings.get("command")
    if flag is None:
        raise ConfigError("no command given")
    return Command.from_flag(flag)


def _seed_fallback() -> dict[str, Any]:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return {}
    try:
        return {"seed": int(raw)}
    except ValueError:
        raise ConfigError(f"${SEED_ENV} must be an integer, got {raw!r}") from None


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    """Resolve a RunConfig: defaults < preset < config file < flags.

    Raises:
        ConfigError: unknown flag, missing ``--alpha``, bad config file or preset
        ParameterDomainError: a value outside its domain, including the stepsize guard

    """
    args = build_parser().parse_args(argv)
    file_settings = load_config_file(args.config) if args.config else {}
    command = _resolve_command(args, file_settings)
    flag_settings = _flag_settings(args)

    settings: dict[str, Any] = {**DEFAULTS, **_seed_fallback()}
    if command in FIGURE_DELTA_EXPS:
        settings["delta_exps"] = FIGURE_DELTA_EXPS[command]
    preset = flag_settings.get("preset", file_settings.get("preset", "desk"))
    settings.update(PRESETS[preset].get(command, {}))
    settings.update({k: v for k, v in file_settings.items() if k not in {"command", "preset"}})
    settings.update({k: v for k, v in flag_settings.items() if k != "preset"})

    if "alpha" not in settings:
        raise ConfigError("the following argument is required: --alpha")
    settings.setdefault("paths", 1)
    settings.setdefault("ref_exp", None)
    settings.setdefault("out", f"{command.flag}.csv")

    config = RunConfig(
        command=command,
        problem=settings["problem"],
        alpha=settings["alpha"],
        theta=settings["theta"],
        delta_exps=tuple(settings["delta_exps"]),
        ref_exp=settings["ref_exp"],
        n_paths=settings["paths"],
        horizon=settings["horizon"],
        seed=settings["seed"],
        out=Path(settings["out"]),
        threads=settings["threads"],
        phi=settings["phi"],
        resolution=settings["resolution"],
        newton_tolerance=settings["newton_tol"],
        log_level=settings["log_level"],
    )
    # stepsize guard before any simulation
    config.solver_config().check_problem(problem_from_name(config.problem))
    logger.debug("Resolved %s", config)
    return config
