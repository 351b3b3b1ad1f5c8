import numpy as np
import pytest
import torch

from dp3d.mesh import TriMesh, normalize_mesh
from dp3d.shapes import hinged_cylinder, icosahedron, icosphere

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def sphere():
    return icosphere(3)


@pytest.fixture(scope="session")
def ico():
    return icosahedron()


@pytest.fixture(scope="session")
def triangle():
    # unit equilateral triangle
    v = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3) / 2, 0.0]])
    return TriMesh(v, np.array([[0, 1, 2]]))


@pytest.fixture(scope="session")
def cylinder():
    return hinged_cylinder()


@pytest.fixture(scope="session")
def small_cylinder():
    """Coarse normalized 2-part cylinder for fast model tests."""
    shape = hinged_cylinder(n_around=8, rings_per_segment=3)
    return shape, normalize_mesh(shape.mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
