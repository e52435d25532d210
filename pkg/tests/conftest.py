import numpy as np
import pytest

from ringclim.design import assemble
from ringclim.synth import SynthConfig, simulate


@pytest.fixture(scope="session")
def small_data():
    return simulate(SynthConfig(n_trees=40, n_stands=6, n_years=25, seed=3))


@pytest.fixture(scope="session")
def small_design(small_data):
    return assemble(small_data.rings, small_data.climate, small_data.truth["variables"], n_knots=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from verdicts import VERDICTS
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
