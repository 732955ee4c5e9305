import numpy as np
import pytest
from hypothesis import settings

from mubc.mesh import build_graph, classify_nodes, generate_mesh

settings.register_profile("ci", deadline=None, max_examples=50)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def mesh_exp1():
    return generate_mesh("diffusion", 0.08)


@pytest.fixture(scope="session")
def mesh_exp2():
    return generate_mesh("advdiff", 0.1)


@pytest.fixture(scope="session")
def cls_exp1(mesh_exp1):
    return classify_nodes(mesh_exp1)


@pytest.fixture(scope="session")
def cls_exp2(mesh_exp2):
    return classify_nodes(mesh_exp2)


@pytest.fixture(scope="session")
def graph_exp1(mesh_exp1):
    return build_graph(mesh_exp1)


def random_connected_graph(rng, n, extra_edges=0):
    """Random tree plus extra edges; always connected."""
    edges = set()
    for v in range(1, n):
        u = int(rng.integers(0, v))
        edges.add((u, v))
    while len(edges) < n - 1 + extra_edges:
        i, j = rng.integers(0, n, 2)
        if i != j:
            edges.add((min(i, j), max(i, j)))
    return sorted(edges)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
