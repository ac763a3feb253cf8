import numpy as np
import pytest

from addtree.bench import load_builtin_spec


@pytest.fixture(scope="session")
def jenatton():
    return load_builtin_spec("jenatton")


@pytest.fixture(scope="session")
def example():
    return load_builtin_spec("example")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria append (number, passed, detail) here; printed after the run.
ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
