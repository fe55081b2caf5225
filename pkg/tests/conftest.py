import numpy as np
import pytest
from hypothesis import settings

from shapesync.pipeline import PipelineConfig, prepare_collection, prepare_shape
from shapesync.primitives import blob, icosphere, tetrahedron

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")

SMALL = PipelineConfig(k_lb=20, k_elastic=8)


@pytest.fixture(scope="session")
def tet():
    return tetrahedron()


@pytest.fixture(scope="session")
def ico():
    return icosphere(2)


@pytest.fixture(scope="session")
def blob200():
    return blob(200, seed=0)


@pytest.fixture(scope="session")
def blob_shape(blob200):
    return prepare_shape(blob200, SMALL)


@pytest.fixture(scope="session")
def ico_shape(ico):
    return prepare_shape(ico, SMALL)


@pytest.fixture(scope="session")
def toy_shapes():
    """Three distinct 20-vertex shapes with small bases."""
    cfg = PipelineConfig(k_lb=6, k_elastic=4, features="xyz")
    return prepare_collection([blob(20, seed=s, name=f"toy{s}") for s in range(3)], cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record one line per acceptance criterion; echoed in the terminal summary."""
    def record(number, title, passed, detail):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        print(line)
        _ACCEPTANCE_LINES.append((number, line))
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
