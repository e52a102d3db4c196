import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, os.path.dirname(__file__))

settings.register_profile("default", deadline=None, max_examples=30,
                          suppress_health_check=[HealthCheck.too_slow, HealthCheck.filter_too_much])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def example_problem():
    from cgforge.tpspec import EXAMPLE_PROBLEM, problem_from_dict

    return problem_from_dict(EXAMPLE_PROBLEM)


@pytest.fixture
def scalar_problem():
    from cgforge.tpspec import validate

    return validate("1x0e", "1x0e", "1x0e", [(1, 1, 1, "B")])


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
