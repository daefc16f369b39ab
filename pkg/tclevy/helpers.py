"""Collection of helpers shared across the tclevy modules."""

from enum import IntEnum


class TcLevyExceptionError(Exception):
    """Generic tclevy exception."""


class ParameterDomainError(TcLevyExceptionError, ValueError):
    """A numeric argument lies outside the domain the operation accepts."""


class WellPosednessError(ParameterDomainError):
    """The implicit theta step is not guaranteed to have a unique solution."""


class NewtonConvergenceError(TcLevyExceptionError):
    """Newton iteration did not reach the requested tolerance."""


class SingularJacobianError(NewtonConvergenceError):
    """Newton Jacobian is numerically singular."""


class QuadratureConvergenceError(TcLevyExceptionError):
    """Compensator quadrature did not settle under node doubling."""


class ResourceCapError(TcLevyExceptionError):
    """A simulation grew past its safety cap."""


class GridMismatchError(TcLevyExceptionError):
    """Two grids that must agree (stepsize, length, divisibility) do not."""


class ConfigError(TcLevyExceptionError):
    """Bad command line flag, config file entry, preset or problem name."""


class StreamPurpose(IntEnum):
    """Independent child streams of one Monte Carlo path."""

    SUBORDINATOR = 0
    BROWNIAN = 1
    JUMP_TIMES = 2
    JUMP_MARKS = 3
    CHECKS = 4


class Command(IntEnum):
    """Commands understood by the CLI."""

    SUBORDINATOR = 0
    INVERSE = 1
    PATH = 2
    STRONG_ORDER = 3
    WEAK_ORDER = 4

    @property
    def flag(self) -> str:
        """Return the command as typed on the command line."""
        return self.name.lower().replace("_", "-")

    @classmethod
    def from_flag(cls, flag: str) -> "Command":
        """Look up a command from its command line spelling."""
        try:
            return cls[flag.upper().replace("-", "_")]
        except KeyError:
            valid = ", ".join(c.flag for c in cls)
            raise ConfigError(f"Unknown command {flag!r} (expected one of {valid})") from None


def dyadic(exponent: int) -> float:
    """Return 2**-exponent as an exact float."""
    return 2.0 ** (-exponent)


def require(condition: bool, message: str) -> None:  # noqa: FBT001
    """Raise ParameterDomainError naming the violated constraint."""
    if not condition:
        raise ParameterDomainError(message)
