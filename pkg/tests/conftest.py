import numpy as np
import pytest

from rigid_accum.core import RigidTransform


def random_transform(rng, max_t=5.0):
    q = rng.normal(size=4)
    return RigidTransform(q / np.linalg.norm(q), rng.uniform(-max_t, max_t, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
