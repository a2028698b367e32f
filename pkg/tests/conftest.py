import numpy as np
import pytest

from forge import synth

# acceptance lines collected by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES, key=lambda k: int(k[1:])):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])


@pytest.fixture(scope="session")
def default_data():
    return synth.generate(synth.SynthConfig(seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
