import numpy as np
import pytest

from chdroplet.droplet import DropletFamily
from chdroplet.fermi import FrameCache, compute_frame
from chdroplet.spectral import Grid


@pytest.fixture(scope="session")
def grid64():
    return Grid(64)


@pytest.fixture(scope="session")
def family06(grid64):
    return DropletFamily(grid64, 0.06)


@pytest.fixture(scope="session")
def frame06(family06):
    return compute_frame(family06, (0.5, 0.5))


@pytest.fixture
def cache06(family06, frame06):
    cache = FrameCache(family06)
    cache.frames.append(frame06)
    return cache


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
