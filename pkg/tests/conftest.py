from __future__ import annotations

import pytest
from hypothesis import HealthCheck, settings

from mti import config as cfgmod
from mti.dataset import synthetic_volume

settings.register_profile("default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE_LINES: list[str] = []


def pytest_configure(config):
    config.acceptance_lines = ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def toy_cfg():
    return cfgmod.load_config(profile="toy")


@pytest.fixture(scope="session")
def toy_volumes():
    return [synthetic_volume(f"s{i}", (4, 24, 24), seed=0) for i in range(2)]
