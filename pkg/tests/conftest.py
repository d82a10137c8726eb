import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from slsfilter.baseline_mpsf import TubeConfig
from slsfilter.explicit_filter import synthesize
from slsfilter.problems import double_integrator

settings.register_profile("repo", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def problem():
    return double_integrator()


@pytest.fixture(scope="session")
def tube_cfg(problem):
    return TubeConfig.from_problem(problem)


@pytest.fixture(scope="session")
def safe_set(problem):
    return synthesize(problem)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one verdict line per acceptance criterion; printed after the run."""
    return _ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
