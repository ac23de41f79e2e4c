import warnings

import numpy as np
import pytest

from rdmesh.mesh import Mesh


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def obtuse_pair() -> Mesh:
    """Two triangles sharing edge (0, 1) whose opposite angles sum past pi."""
    verts = [(0.0, 0.0), (2.0, 0.0), (1.0, 0.2), (1.0, -0.2)]
    return Mesh(verts, [(0, 1, 2), (0, 3, 1)])


@pytest.fixture
def quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        yield


# One line per acceptance criterion, printed after the test session.
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
