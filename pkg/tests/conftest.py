import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from readc.envs import load_board, make_grid_env

settings.register_profile(
    "readc", deadline=None, max_examples=60,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("readc")

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def keylock():
    return make_grid_env(load_board("keylock_10x10"))


@pytest.fixture
def flags():
    return make_grid_env(load_board("flags_10x10"))
