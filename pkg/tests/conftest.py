import pytest

from tclevy import builtin_linear_problem, builtin_paper_example, make_stream
from tclevy.kernels import RandomStream
from tclevy.problems import SdeProblem


@pytest.fixture
def stream() -> RandomStream:
    return make_stream(20240601, 0)


@pytest.fixture(scope="session")
def paper_problem() -> SdeProblem:
    return builtin_paper_example()


@pytest.fixture(scope="session")
def decay_problem() -> SdeProblem:
    """Deterministic ``dY = -Y dt``."""
    return builtin_linear_problem(-1.0, 0.0, 0.0)


@pytest.fixture(scope="session")
def still_problem() -> SdeProblem:
    """Zero dynamics: every scheme keeps ``x0``."""
    return builtin_linear_problem(0.0, 0.0, 0.0)
