import numpy as np
import pytest

from lsuq import RngStream

# Lines recorded by the acceptance suite, printed after the run.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return RngStream(12345, 0)


@pytest.fixture
def np_rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
