import numpy as np
import pytest

from latentflow.config import desk_config
from latentflow.harness.synthetic import synth_pair
from latentflow.model import FlowModel
from latentflow.ndtensor import precision, reset_tape


@pytest.fixture(autouse=True)
def _fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture(scope="session")
def desk_model():
    return FlowModel(desk_config())


@pytest.fixture(scope="session")
def pair96():
    return synth_pair(96, 96, np.random.default_rng(0), "smooth", 8.0)


@pytest.fixture(scope="session")
def pair32():
    return synth_pair(32, 32, np.random.default_rng(1), "smooth", 4.0)


def pytest_configure(config):
    config.acceptance_lines = {}


@pytest.fixture
def report(request):
    """``report(n, status, detail)`` records one summary line for acceptance criterion ``n``."""
    def emit(n, status, detail):
        line = f"criterion {n:2d} {status}: {detail}"
        print(line)
        request.config.acceptance_lines[n] = line
    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
