import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from noonphase.frames import DetectorGeometry, FrameStack

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

# filled by tests/test_acceptance.py, printed after the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)


@pytest.fixture
def small_geometry():
    return DetectorGeometry(8, 4)


def random_stack(rng, width, height, n_frames, occupancy):
    geo = DetectorGeometry(width, height)
    dense = rng.random((n_frames, height, width)) < occupancy
    return FrameStack.from_dense(dense, geo), dense.reshape(n_frames, -1).astype(np.int64)
