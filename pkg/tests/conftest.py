import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from csfdslam import synth
from csfdslam.frames import Intrinsics

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def small_camera(width=80):
    s = width / 80
    return Intrinsics(525 / 8 * s, 525 / 8 * s, (width - 1) / 2, (width * 3 / 4 - 1) / 2,
                      width, width * 3 // 4)


@pytest.fixture(scope="session")
def k80():
    return small_camera(80)


@pytest.fixture(scope="session")
def k160():
    return small_camera(160)


@pytest.fixture(scope="session")
def desk():
    return synth.desk_scene()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
