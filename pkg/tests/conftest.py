import numpy as np
import pytest

from pcqa.cloud_io import NormalizedCloud, compute_norm_params, normalize
from pcqa.distort import synthetic_cloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sphere_raw():
    return synthetic_cloud("sphere", 6000, seed=3)


@pytest.fixture(scope="session")
def sphere_norm(sphere_raw):
    return normalize(sphere_raw, compute_norm_params(sphere_raw))


def random_cloud(rng, n, lo=0.0, hi=1024.0, colored=True):
    pos = rng.uniform(lo, hi, size=(n, 3))
    col = rng.integers(0, 256, size=(n, 3), dtype=np.uint8) if colored else np.full((n, 3), 128, np.uint8)
    return NormalizedCloud(pos, col, colored)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
