import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record and echo one PASS/FAIL line per acceptance criterion."""

    def report(number, passed, detail, seconds):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}  [{seconds:.1f} s]"
        _ACCEPTANCE.append((number, line))
        print("\n" + line)

    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
