import numpy as np
import pytest

from sensorsched.process_model import cost_ladder, reference_system, steady_state_covariance

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def system():
    return reference_system()


@pytest.fixture(scope="session")
def ladder(system):
    return cost_ladder(system, steady_state_covariance(system), 30)


@pytest.fixture(scope="session")
def traces(ladder):
    return np.asarray(ladder.traces)


@pytest.fixture
def report():
    """Record one acceptance line; printed again in the terminal summary."""

    def _report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
