import numpy as np
import pytest

from hybridls.domain import HyperRectangle
from hybridls.sampler import SampleDesign


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def square():
    return HyperRectangle.cube(2)


def orthonormal_design(rng, m, n):
    """Random design whose weighted rows are orthonormal columns, with consistent ``phi``."""
    R = np.linalg.qr(rng.standard_normal((m, n)))[0]
    w = rng.uniform(0.2, 3.0, m)
    phi = m * np.sum(R ** 2, axis=1) / w
    return SampleDesign.from_arrays(w, phi, R / np.sqrt(w)[:, None])


# one verdict line per acceptance criterion, echoed at the end of the run
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
