import numpy as np
import pytest
from hypothesis import settings

from cfmplan import geom

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def straight():
    """6 m x 60 m straight road and its distance field."""
    sc = geom.build_scenario(geom.ScenarioRecipe("straight", width=6.0, length=60.0, seed=7))
    return sc, geom.compute_esdf(geom.rasterize_road(sc))


@pytest.fixture(scope="session")
def curve():
    sc = geom.build_scenario(geom.ScenarioRecipe("curve-left", width=6.0, radius=30.0, seed=1))
    return sc, geom.compute_esdf(geom.rasterize_road(sc))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criterion (slow)")


@pytest.fixture
def record_criterion(request):
    """``record(number, name, ok, detail)`` prints one PASS/FAIL line and returns ``ok``."""
    lines = request.config.stash[ACCEPTANCE_LINES]

    def record(number, name, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {name}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
