import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        status, detail = CRITERIA[k]
        terminalreporter.write_line(f"{status} criterion {k}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
