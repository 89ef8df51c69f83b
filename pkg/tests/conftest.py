import sys

import numpy as np
import pytest

from geonode.graph import load_bundled


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    acceptance = sys.modules.get("test_acceptance")
    lines = getattr(acceptance, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def cabinet():
    return load_bundled("cabinet")


@pytest.fixture(scope="session")
def sofa():
    return load_bundled("sofa")


@pytest.fixture(scope="session")
def divboards():
    return load_bundled("cabinet_divboards")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
