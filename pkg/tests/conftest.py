import logging

import numpy as np
import pytest

from fdiqcd.kcif import compute_gain_schedule
from fdiqcd.sim_core import reference_topology, random_model

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ref_model():
    """Five-node reference model (p = q = 2) drawn with the default model seed."""
    return random_model(reference_topology(), 2, 2, np.random.default_rng([2024]))


@pytest.fixture(scope="session")
def ref_schedule(ref_model):
    return compute_gain_schedule(ref_model, 130)


@pytest.fixture(autouse=True)
def _quiet_jitter(caplog):
    caplog.set_level(logging.ERROR, logger="fdiqcd")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
