import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_connected_graph
from mubc.mesh import (BC_SWITCH, HOLE_RADIUS, INTERNAL, M_DIRICHLET,
                       M_MUB_CIRCLE, ONLY_DIRICHLET, ONLY_NEUMANN, Mesh2D,
                       MeshError, MeshGraph, build_graph, classify_nodes,
                       generate_mesh, graph_diameter, mesh_from_json,
                       mesh_hash, mesh_to_json)


def tri_mesh(nodes, triangles, markers):
    edges = np.array([e for e, _ in markers], dtype=np.int64)
    return Mesh2D(np.array(nodes, dtype=float), np.array(triangles, dtype=np.int64),
                  edges, tuple(m for _, m in markers), "plain")


def single_triangle(p0=(0, 0), p1=(1, 0), p2=(0, 1)):
    return tri_mesh([p0, p1, p2], [[0, 1, 2]],
                    [((0, 1), M_DIRICHLET), ((1, 2), M_DIRICHLET), ((2, 0), M_DIRICHLET)])


# ---------------------------------------------------------------------------
# generation


def test_unit_square_coarse_is_valid():
    mesh = generate_mesh("plain", 0.5)
    assert mesh.n_nodes >= 4
    assert np.all(mesh.triangle_areas() > 0)


def test_hole_mesh_circle_markers():
    mesh = generate_mesh("diffusion", 0.08)
    circle_nodes = set()
    for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        if m == M_MUB_CIRCLE:
            circle_nodes.update((int(i), int(j)))
    assert len(circle_nodes) >= 8
    center = np.array([0.5, 0.5])
    for n in circle_nodes:
        assert abs(np.linalg.norm(mesh.nodes[n] - center) - HOLE_RADIUS) < 1e-9


def test_degenerate_h_rejected():
    with pytest.raises(MeshError):
        generate_mesh("plain", -1.0)
    with pytest.raises(MeshError):
        generate_mesh("diffusion", 0.0)


@pytest.mark.parametrize("experiment,area", [
    ("diffusion", 1.0 - math.pi * HOLE_RADIUS ** 2),
    ("advdiff", 1.0),
    ("plain", 1.0),
])
def test_mesh_area_within_2_percent(experiment, area):
    mesh = generate_mesh(experiment, 0.06)
    assert abs(mesh.triangle_areas().sum() - area) <= 0.02 * area


def test_mesh_json_roundtrip(mesh_exp1):
    text = mesh_to_json(mesh_exp1)
    back = mesh_from_json(text)
    assert mesh_to_json(back) == text
    assert mesh_hash(back) == mesh_hash(mesh_exp1)


# ---------------------------------------------------------------------------
# graph


def test_equilateral_triangle_all_weights_one():
    mesh = single_triangle((0, 0), (1, 0), (0.5, math.sqrt(3) / 2))
    g = build_graph(mesh)
    np.testing.assert_allclose(g.weights, 1.0, atol=1e-12)


def test_weights_inverse_to_lengths():
    mesh = single_triangle((0, 0), (1, 0), (0, 2))
    g = build_graph(mesh)
    by_pair = {tuple(e): w for e, w in zip(map(tuple, g.edges), g.weights)}
    assert by_pair[(0, 1)] == pytest.approx(1.0)
    assert by_pair[(0, 2)] == pytest.approx(0.5)
    assert by_pair[(1, 2)] == pytest.approx(1.0 / math.sqrt(5))


def test_weight_range_on_generated_meshes(mesh_exp1, mesh_exp2):
    for mesh in (mesh_exp1, mesh_exp2):
        g = build_graph(mesh)
        assert g.weights.min() > 0
        assert g.weights.max() == pytest.approx(1.0, abs=1e-12)


def test_zero_length_edge_rejected():
    mesh = tri_mesh([(0, 0), (0, 0), (0, 1)], [[0, 1, 2]],
                    [((0, 1), M_DIRICHLET), ((1, 2), M_DIRICHLET), ((2, 0), M_DIRICHLET)])
    with pytest.raises(MeshError):
        build_graph(mesh)


def test_diameter_path_and_complete():
    path = MeshGraph.from_edges(5, [(i, i + 1) for i in range(4)])
    assert graph_diameter(path) == 4
    complete = MeshGraph.from_edges(4, [(i, j) for i in range(4) for j in range(i + 1, 4)])
    assert graph_diameter(complete) == 1


def test_disconnected_rejected():
    with pytest.raises(MeshError):
        MeshGraph.from_edges(4, [(0, 1), (2, 3)])


@given(st.integers(5, 30), st.integers(0, 12), st.integers(0, 2 ** 31))
def test_diameter_matches_floyd_warshall(n, extra, seed):
    rng = np.random.default_rng(seed)
    edges = random_connected_graph(rng, n, extra)
    g = MeshGraph.from_edges(n, edges)
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0)
    for i, j in edges:
        dist[i, j] = dist[j, i] = 1
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    assert graph_diameter(g) == int(dist.max())


def test_graph_and_diameter_deterministic(mesh_exp1):
    g1, g2 = build_graph(mesh_exp1), build_graph(mesh_exp1)
    assert np.array_equal(g1.edges, g2.edges)
    assert np.array_equal(g1.weights, g2.weights)
    assert g1.diameter() == g2.diameter()


# ---------------------------------------------------------------------------
# classification


def test_classify_exp1(mesh_exp1, cls_exp1):
    cls = cls_exp1
    center = np.array([0.5, 0.5])
    on_circle = np.abs(np.linalg.norm(mesh_exp1.nodes - center, axis=1) - HOLE_RADIUS) < 1e-9
    assert np.all(cls.tags[on_circle] == ONLY_NEUMANN)
    assert np.all(cls.on_mub[on_circle])
    y = mesh_exp1.nodes[:, 1]
    outer_tb = (np.abs(y) < 1e-9) | (np.abs(y - 1) < 1e-9)
    assert np.all(cls.tags[outer_tb] == ONLY_DIRICHLET)
    assert cls.p_b == int(on_circle.sum())


def test_classify_exp2_all_switch(mesh_exp2, cls_exp2):
    assert np.all(cls_exp2.tags[cls_exp2.on_mub] == BC_SWITCH)
    assert cls_exp2.p_b == int(cls_exp2.on_mub.sum())
    assert (cls_exp2.tags == BC_SWITCH).sum() == cls_exp2.p_b


def test_classify_plain_all_dirichlet():
    mesh = generate_mesh("plain", 0.25)
    cls = classify_nodes(mesh)
    assert not np.any(cls.tags == BC_SWITCH)
    assert not np.any(cls.tags == ONLY_NEUMANN)
    assert cls.p_b == 0


def test_classification_is_partition(cls_exp1, cls_exp2):
    for cls in (cls_exp1, cls_exp2):
        assert np.all(np.isin(cls.tags, [INTERNAL, ONLY_NEUMANN, ONLY_DIRICHLET,
                                         BC_SWITCH]))


def test_corner_nodes_dirichlet_dominant(mesh_exp1, cls_exp1, mesh_exp2, cls_exp2):
    # diffusion: outer square corners join a Dirichlet and a Neumann side
    for corner in [(0, 0), (1, 0), (0, 1), (1, 1)]:
        idx = np.flatnonzero(np.all(np.abs(mesh_exp1.nodes - corner) < 1e-9, axis=1))
        assert idx.size == 1
        assert cls_exp1.tags[idx[0]] == ONLY_DIRICHLET
    # advdiff: the junctions at (0, 0.6) and (1, 0.6) join the fixed Dirichlet
    # sides with the parametrized sides
    for corner in [(0.0, 0.6), (1.0, 0.6)]:
        idx = np.flatnonzero(np.all(np.abs(mesh_exp2.nodes - corner) < 1e-9, axis=1))
        assert idx.size == 1
        assert cls_exp2.tags[idx[0]] == ONLY_DIRICHLET
        assert not cls_exp2.on_mub[idx[0]]
    # while the lower corners join two parametrized segments and stay switch
    for corner in [(0.0, 0.0), (1.0, 0.0)]:
        idx = np.flatnonzero(np.all(np.abs(mesh_exp2.nodes - corner) < 1e-9, axis=1))
        assert cls_exp2.tags[idx[0]] == BC_SWITCH


def test_mub_order_exp1_counterclockwise(mesh_exp1, cls_exp1):
    pts = mesh_exp1.nodes[cls_exp1.mub_order] - np.array([0.5, 0.5])
    ang = np.mod(np.arctan2(pts[:, 1], pts[:, 0]), 2 * math.pi)
    assert np.all(np.diff(ang) > 0)
    assert ang[0] == pytest.approx(ang.min())


def test_mub_order_exp2_polyline(mesh_exp2, cls_exp2):
    pts = mesh_exp2.nodes[cls_exp2.mub_order]
    # left segment first, descending in y from just below the junction
    left = pts[pts[:, 0] < 1e-9]
    assert np.all(np.diff(left[:, 1]) < 0)
    assert pts[0, 0] < 1e-9 and pts[0, 1] == pytest.approx(left[:, 1].max())
    # bottom, then right ascending
    right = pts[pts[:, 0] > 1 - 1e-9]
    assert np.all(np.diff(right[:, 1]) > 0)
    assert pts[-1, 0] > 1 - 1e-9
