import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("default")

ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {title}" + (f" [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_study():
    """The 100-replicate benchmark study with default settings, run once per session."""
    from pocal.benchmark import BenchmarkConfig, run_study

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return run_study(BenchmarkConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
