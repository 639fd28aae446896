import numpy as np
import pytest

from locrom import fem, mesh


@pytest.fixture(scope="session")
def material():
    return fem.Material.from_young_poisson([30000.0, 60000.0], [0.2, 0.2])


@pytest.fixture(scope="session")
def rce_plain():
    """Homogeneous 5-vertex RCE."""
    return mesh.build_rce_mesh(mesh.RceGeometry(1.0, (), 5))


@pytest.fixture(scope="session")
def rce_disk():
    """Single centered inclusion, 7 vertices per edge."""
    return mesh.build_rce_mesh(mesh.RceGeometry(1.0, (((0.5, 0.5), 0.2),), 7))


@pytest.fixture(scope="session")
def grid_3x3():
    return mesh.build_coarse_grid(("rectangle", 3, 3))


def boundary_nodes(fine):
    return np.unique(np.concatenate([fine.boundary_edges[e] for e in mesh.EDGE_IDS]))
