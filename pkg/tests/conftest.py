import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240613)


def pytest_terminal_summary(terminalreporter):
    import _runs
    if _runs.ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_runs.ACCEPTANCE):
            terminalreporter.write_line(_runs.ACCEPTANCE[key])
