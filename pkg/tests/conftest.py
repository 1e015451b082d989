import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


def random_cohort(rng, n, p_dem=0.4, p_death=0.3, weighted=True, truncated=True, ties=False):
    """Small left-truncated competing-risks cohort as plain arrays."""
    entry = rng.uniform(50, 60, n) if truncated else np.zeros(n)
    length = rng.exponential(10, n) + 0.1
    if ties:
        length = np.round(length)
        length[length == 0] = 1.0
    exit_ = entry + length
    if ties:
        exit_ = np.round(exit_)
        entry = np.minimum(entry, exit_ - 0.5)
    u = rng.random(n)
    event = np.where(u < p_dem, 1, np.where(u < p_dem + p_death, 2, 0))
    weight = rng.uniform(0.5, 2.0, n) if weighted else np.ones(n)
    return entry, exit_, event, weight


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE):
        terminalreporter.write_line(line[1])
