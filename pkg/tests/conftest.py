import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bsvie import build_graded_grid, make_example1_kernel

settings.register_profile("bsvie", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("bsvie")


@pytest.fixture(scope="session")
def ex1_kernel():
    return make_example1_kernel(0.5, 2.0)


@pytest.fixture(scope="session")
def grid16():
    return build_graded_grid(16.0, 32, 8, 1.0, 2.0)


@pytest.fixture(scope="session")
def grid20():
    return build_graded_grid(20.0, 40, 8, 1.0, 2.0)


@pytest.fixture(scope="session")
def small_grid():
    """Coarse grid for Monte Carlo tests."""
    return build_graded_grid(4.0, 8, 3, 1.0, 2.0)


def exp_driver_fn(mu=1.0):
    return lambda t, s: np.exp(-mu * np.asarray(s, dtype=float)) * np.ones_like(t)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        terminalreporter.write_line(RESULTS[n].line())
