from .harness import (
    ErrorTable,
    NoiseGrid,
    aggregate_noise,
    fit_order,
    generate_coupled_noise,
    strong_error_experiment,
    weak_error_experiment,
)
from .helpers import TcLevyExceptionError
from .kernels import LevyMeasureSpec, RandomStream, make_stream
from .problems import SdeProblem, builtin_linear_problem, builtin_paper_example
from .solver import SolverConfig, simulate_original_path, theta_step
from .timechange import InverseTimeChange, SubordinatorPath, build_inverse, simulate_subordinator

__all__ = [
    "ErrorTable",
    "InverseTimeChange",
    "LevyMeasureSpec",
    "NoiseGrid",
    "RandomStream",
    "SdeProblem",
    "SolverConfig",
    "SubordinatorPath",
    "TcLevyExceptionError",
    "aggregate_noise",
    "build_inverse",
    "builtin_linear_problem",
    "builtin_paper_example",
    "fit_order",
    "generate_coupled_noise",
    "make_stream",
    "simulate_original_path",
    "simulate_subordinator",
    "strong_error_experiment",
    "theta_step",
    "weak_error_experiment",
]
