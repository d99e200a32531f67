import numpy as np
import pytest
from hypothesis import settings
from hypothesis import strategies as st

from railodo.geometry import Pose

settings.register_profile("railodo", deadline=None, max_examples=100)
settings.load_profile("railodo")


def random_pose(rng, scale=5.0):
    q = rng.normal(size=4)
    return Pose(q / np.linalg.norm(q), rng.normal(scale=scale, size=3))


@st.composite
def poses(draw, scale=10.0):
    q = draw(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
        lambda v: np.linalg.norm(v) > 0.1))
    t = draw(st.lists(st.floats(-scale, scale), min_size=3, max_size=3))
    return Pose(np.array(q), np.array(t))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
