import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lencap import world
from lencap.vocab import Vocab

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def vocab():
    return Vocab()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scene(*objects, seed=0):
    """Scene from ``(shape, color, size, cx, cy)`` tuples."""
    return world.Scene(seed, tuple(world.ObjectSpec(*o) for o in objects))


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
