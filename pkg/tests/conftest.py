import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sidoa.corpus import synthetic_corpus

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def small_corpus():
    """Six synthetic talkers, one 4 s recording each, already at 8 kHz."""
    return synthetic_corpus(n_speakers=6, per_speaker=1, seconds=4.0, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
