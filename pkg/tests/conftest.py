import numpy as np
import pytest

from mqme.sim import EnvConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def config():
    return EnvConfig()


@pytest.fixture(scope="session")
def small_dataset(config):
    """A quick stratified dataset: 8 train and 8 test trajectories per embodiment."""
    from mqme import demogen
    return demogen.build_dataset(config, quotas=(8, 8))


_VERDICTS = []


@pytest.fixture
def verdict():
    """Record one acceptance line: ``verdict(number, passed, detail)``."""
    def record(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        _VERDICTS.append((number, line))
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
