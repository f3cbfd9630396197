import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

os.environ.setdefault("F2P_THREADS", "1")

settings.register_profile("f2p", deadline=None, max_examples=40, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("f2p")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sinusoid(shape, period, angle=0.0, phase=0.0):
    """0.5 + 0.5 cos along direction ``angle`` (radians from the x axis)."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(np.float64)
    u = x * np.cos(angle) + y * np.sin(angle)
    return 0.5 + 0.5 * np.cos(2 * np.pi * u / period + phase)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
