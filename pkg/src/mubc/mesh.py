"""Triangular meshes for the experiment domains and their node graphs.

Two domains are supported, each with boundary markers tied to an experiment:

  * ``diffusion``: unit square with a circular hole of radius 0.3 centered at
    (0.5, 0.5).  Outer bottom/top carry fixed homogeneous Dirichlet data,
    outer left/right fixed homogeneous Neumann data, and the inner circle is
    the parametrized boundary.
  * ``advdiff``: unit square.  The top side and the upper parts of the two
    vertical sides (y in [0.6, 1]) are fixed Dirichlet; the lower side parts
    and the bottom form the parametrized boundary, split into three marked
    segments.
  * ``plain``: unit square with every boundary edge marked Dirichlet (used by
    solver verification).

Generators are structured and fully deterministic: the square uses an n-by-n
grid with alternating cell diagonals, the holed square uses a radial ring
grid between the circle and the square.  Any conforming generator is
acceptable for this artifact as long as the markers are right.

Mesh file format (JSON): keys ``nodes`` (array of [x, y]), ``triangles``
(array of [i, j, k]), ``boundary_edges`` (array of [[i, j], "marker"]), and
``experiment`` (string).  Floats are written in full round-trip precision.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

HOLE_CENTER = (0.5, 0.5)
HOLE_RADIUS = 0.3
SPLIT_Y = 0.6  # junction height between fixed sides and parametrized sides

# boundary markers, per experiment
M_FIX_D_BOTTOM = "fix-dirichlet-bottom"
M_FIX_D_TOP = "fix-dirichlet-top"
M_FIX_N_LEFT = "fix-neumann-left"
M_FIX_N_RIGHT = "fix-neumann-right"
M_MUB_CIRCLE = "mub-circle"
M_FIX_TOP = "fix-top"
M_FIX_SIDE_LEFT = "fix-side-left"
M_FIX_SIDE_RIGHT = "fix-side-right"
M_MUB_LEFT = "mub-left"
M_MUB_RIGHT = "mub-right"
M_MUB_BOTTOM = "mub-bottom"
M_DIRICHLET = "dirichlet"

_DIRICHLET_MARKERS = {M_FIX_D_BOTTOM, M_FIX_D_TOP, M_FIX_TOP, M_FIX_SIDE_LEFT,
                      M_FIX_SIDE_RIGHT, M_DIRICHLET}
_NEUMANN_MARKERS = {M_FIX_N_LEFT, M_FIX_N_RIGHT}
_MUB_MARKERS = {M_MUB_CIRCLE, M_MUB_LEFT, M_MUB_RIGHT, M_MUB_BOTTOM}

EXPERIMENTS = ("diffusion", "advdiff", "plain")

# node tags
INTERNAL = 0
ONLY_NEUMANN = 1
ONLY_DIRICHLET = 2
BC_SWITCH = 3
TAG_NAMES = {INTERNAL: "internal", ONLY_NEUMANN: "only-neumann",
             ONLY_DIRICHLET: "only-dirichlet", BC_SWITCH: "bc-switch"}


class MeshError(ValueError):
    """Raised for invalid meshes or degenerate generation requests."""


@dataclass(frozen=True)
class Mesh2D:
    """Triangulated 2-D domain with marked boundary edges."""

    nodes: np.ndarray          # (N, 2) float64
    triangles: np.ndarray      # (T, 3) int, positively oriented
    boundary_edges: np.ndarray  # (E, 2) int
    boundary_markers: tuple    # (E,) marker strings
    experiment: str

    def __post_init__(self):
        for arr in (self.nodes, self.triangles, self.boundary_edges):
            arr.flags.writeable = False

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    def triangle_areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))


def validate_mesh(mesh: Mesh2D):
    """Check the structural mesh invariants; raise MeshError on violation."""
    n = mesh.n_nodes
    if mesh.triangles.size and (mesh.triangles.min() < 0 or mesh.triangles.max() >= n):
        raise MeshError("triangle index out of range")
    areas = mesh.triangle_areas()
    if np.any(areas <= 0):
        raise MeshError("non-positively-oriented or degenerate triangle")
    # every boundary edge must belong to exactly one triangle, and the set of
    # single-triangle edges must equal the marked boundary
    edge_count = {}
    tris = mesh.triangles
    for t in range(tris.shape[0]):
        a, b, c = tris[t]
        for i, j in ((a, b), (b, c), (c, a)):
            key = (min(i, j), max(i, j))
            edge_count[key] = edge_count.get(key, 0) + 1
    hull = {e for e, cnt in edge_count.items() if cnt == 1}
    marked = [tuple(sorted(e)) for e in mesh.boundary_edges.tolist()]
    if len(set(marked)) != len(marked):
        raise MeshError("boundary edge marked twice (marker overlap)")
    if set(marked) != hull:
        raise MeshError("marked boundary does not cover the topological boundary")
    if mesh.experiment not in EXPERIMENTS:
        raise MeshError(f"unknown experiment {mesh.experiment!r}")


# ---------------------------------------------------------------------------
# generators


def _square_distance(theta):
    # distance from the square center to its boundary along direction theta
    return 0.5 / max(abs(math.cos(theta)), abs(math.sin(theta)))


def _grid_square(n):
    xs = np.linspace(0.0, 1.0, n + 1)
    nodes = np.array([(x, y) for y in xs for x in xs])
    idx = lambda i, j: j * (n + 1) + i
    tris = []
    for j in range(n):
        for i in range(n):
            a, b, c, d = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            if (i + j) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]
    return nodes, np.array(tris, dtype=np.int64), idx


def _square_boundary_edges(n, idx, classify):
    edges, markers = [], []
    for i in range(n):  # bottom, left to right
        edges.append((idx(i, 0), idx(i + 1, 0)))
        markers.append(classify("bottom", i, n))
    for j in range(n):  # right, upward
        edges.append((idx(n, j), idx(n, j + 1)))
        markers.append(classify("right", j, n))
    for i in range(n):  # top
        edges.append((idx(i, n), idx(i + 1, n)))
        markers.append(classify("top", i, n))
    for j in range(n):  # left
        edges.append((idx(0, j), idx(0, j + 1)))
        markers.append(classify("left", j, n))
    return edges, markers


def generate_mesh(experiment: str, h: float) -> Mesh2D:
    """Generate the experiment's mesh at target edge length ``h``."""
    if h <= 0:
        raise MeshError(f"target edge length must be positive, got {h}")
    if experiment == "plain":
        n = max(2, round(1.0 / h))
        nodes, tris, idx = _grid_square(n)
        edges, markers = _square_boundary_edges(n, idx, lambda side, k, n_: M_DIRICHLET)
    elif experiment == "advdiff":
        # snap n to a multiple of 5 so the y = 0.6 junction falls on a node
        n = max(5, 5 * round(1.0 / (5.0 * h)))
        nodes, tris, idx = _grid_square(n)
        jcut = round(SPLIT_Y * n)

        def classify(side, k, n_):
            if side == "top":
                return M_FIX_TOP
            if side == "bottom":
                return M_MUB_BOTTOM
            if side == "left":
                return M_MUB_LEFT if k < jcut else M_FIX_SIDE_LEFT
            return M_MUB_RIGHT if k < jcut else M_FIX_SIDE_RIGHT

        edges, markers = _square_boundary_edges(n, idx, classify)
    elif experiment == "diffusion":
        nodes, tris, edges, markers = _ring_mesh(h)
        mesh = Mesh2D(nodes, tris, np.array(edges, dtype=np.int64), tuple(markers), experiment)
        validate_mesh(mesh)
        _check_segment_counts(mesh)
        return mesh
    else:
        raise MeshError(f"unknown experiment {experiment!r}")
    mesh = Mesh2D(nodes, tris, np.array(edges, dtype=np.int64), tuple(markers), experiment)
    validate_mesh(mesh)
    _check_segment_counts(mesh)
    return mesh


def _ring_mesh(h):
    """Radial grid between the hole circle and the outer square."""
    cx, cy = HOLE_CENTER
    M = 8 * max(1, round(2.0 * math.pi * HOLE_RADIUS / (8.0 * h)))
    thetas = [2.0 * math.pi * k / M for k in range(M)]
    mean_ext = sum(_square_distance(t) - HOLE_RADIUS for t in thetas) / M
    R = max(2, round(mean_ext / h))

    nodes = np.empty((M * (R + 1), 2))
    for k, theta in enumerate(thetas):
        d_out = _square_distance(theta)
        ux, uy = math.cos(theta), math.sin(theta)
        for r in range(R + 1):
            rad = HOLE_RADIUS + (d_out - HOLE_RADIUS) * r / R
            x, y = cx + rad * ux, cy + rad * uy
            if r == R:  # snap the outer ring exactly onto the square
                if abs(x) < 1e-9:
                    x = 0.0
                if abs(x - 1.0) < 1e-9:
                    x = 1.0
                if abs(y) < 1e-9:
                    y = 0.0
                if abs(y - 1.0) < 1e-9:
                    y = 1.0
            nodes[k * (R + 1) + r] = (x, y)

    # quad corners ordered (in, out, out, in) so the polygon runs CCW
    idx = lambda k, r: (k % M) * (R + 1) + r
    tris = []
    for k in range(M):
        for r in range(R):
            a, b = idx(k, r), idx(k, r + 1)
            c, d = idx(k + 1, r + 1), idx(k + 1, r)
            if (k + r) % 2 == 0:
                tris += [(a, b, c), (a, c, d)]
            else:
                tris += [(a, b, d), (b, c, d)]

    edges, markers = [], []
    for k in range(M):
        edges.append((idx(k, 0), idx(k + 1, 0)))
        markers.append(M_MUB_CIRCLE)
    for k in range(M):
        i, j = idx(k, R), idx(k + 1, R)
        (x1, y1), (x2, y2) = nodes[i], nodes[j]
        if y1 < 1e-12 and y2 < 1e-12:
            m = M_FIX_D_BOTTOM
        elif y1 > 1 - 1e-12 and y2 > 1 - 1e-12:
            m = M_FIX_D_TOP
        elif x1 < 1e-12 and x2 < 1e-12:
            m = M_FIX_N_LEFT
        elif x1 > 1 - 1e-12 and x2 > 1 - 1e-12:
            m = M_FIX_N_RIGHT
        else:
            raise MeshError("outer ring edge does not lie on a square side")
        edges.append((i, j))
        markers.append(m)
    return nodes, np.array(tris, dtype=np.int64), edges, markers


def _check_segment_counts(mesh):
    counts = {}
    for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        counts.setdefault(m, set()).update((int(i), int(j)))
    for m, nodes in counts.items():
        if len(nodes) < 3:
            raise MeshError(f"marked segment {m!r} has fewer than 3 boundary nodes")


# ---------------------------------------------------------------------------
# mesh graph


@dataclass
class MeshGraph:
    """Undirected weighted graph over mesh nodes (no self-loops)."""

    n_nodes: int
    edges: np.ndarray   # (E, 2) int, i < j
    weights: np.ndarray  # (E,) float in (0, 1]
    _neighbors: list = field(default=None, repr=False)
    _diameter: int = field(default=None, repr=False)
    _matrix: object = field(default=None, repr=False)

    @classmethod
    def from_edges(cls, n_nodes, edges, weights=None):
        edges = np.array([(min(i, j), max(i, j)) for i, j in edges], dtype=np.int64)
        edges = edges.reshape(-1, 2)
        if edges.size and (edges.min() < 0 or edges.max() >= n_nodes):
            raise MeshError("edge index out of range")
        if np.any(edges[:, 0] == edges[:, 1]):
            raise MeshError("self-loops are not allowed")
        if len({(int(i), int(j)) for i, j in edges}) != len(edges):
            raise MeshError("duplicate edge")
        if weights is None:
            weights = np.ones(len(edges))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(edges),):
            raise MeshError("one weight per edge required")
        if len(edges) and (np.any(weights <= 0) or np.any(weights > 1)):
            raise MeshError("edge weights must lie in (0, 1]")
        if len(edges) and abs(weights.max() - 1.0) > 1e-12:
            raise MeshError("at least one edge weight must equal 1")
        g = cls(n_nodes, edges, weights)
        if g.diameter() is None:
            raise MeshError("graph is disconnected")
        return g

    def neighbors(self):
        if self._neighbors is None:
            adj = [[] for _ in range(self.n_nodes)]
            for i, j in self.edges:
                adj[i].append(int(j))
                adj[j].append(int(i))
            self._neighbors = [np.array(sorted(a), dtype=np.int64) for a in adj]
        return self._neighbors

    def adjacency_with_self_loops(self):
        """CSR matrix of edge weights plus unit self-loops (symmetric)."""
        if self._matrix is None:
            i = np.concatenate([self.edges[:, 0], self.edges[:, 1],
                                np.arange(self.n_nodes)])
            j = np.concatenate([self.edges[:, 1], self.edges[:, 0],
                                np.arange(self.n_nodes)])
            v = np.concatenate([self.weights, self.weights, np.ones(self.n_nodes)])
            self._matrix = sp.csr_matrix((v, (i, j)), shape=(self.n_nodes, self.n_nodes))
            self._matrix.sort_indices()
        return self._matrix

    def diameter(self):
        """Max hop-count shortest path; None if the graph is disconnected."""
        if self._diameter is None:
            adj = self.neighbors()
            worst = 0
            dist = np.empty(self.n_nodes, dtype=np.int64)
            for src in range(self.n_nodes):
                dist.fill(-1)
                dist[src] = 0
                q = deque([src])
                while q:
                    u = q.popleft()
                    du = dist[u]
                    for v in adj[u]:
                        if dist[v] < 0:
                            dist[v] = du + 1
                            q.append(v)
                if dist.min() < 0:
                    return None
                worst = max(worst, int(dist.max()))
            self._diameter = worst
        return self._diameter


def build_graph(mesh: Mesh2D) -> MeshGraph:
    """Mesh graph with edge weights inversely proportional to edge lengths.

    The weight of edge (i, j) is l_min / l_ij, which lands in (0, 1] and is
    attained exactly at the globally shortest edge.
    """
    seen = set()
    for tri in mesh.triangles:
        a, b, c = (int(v) for v in tri)
        for i, j in ((a, b), (b, c), (c, a)):
            seen.add((min(i, j), max(i, j)))
    edges = np.array(sorted(seen), dtype=np.int64)
    vec = mesh.nodes[edges[:, 1]] - mesh.nodes[edges[:, 0]]
    lengths = np.hypot(vec[:, 0], vec[:, 1])
    if np.any(lengths <= 0):
        raise MeshError("zero-length edge")
    weights = lengths.min() / lengths
    return MeshGraph.from_edges(mesh.n_nodes, edges, weights)


def graph_diameter(graph: MeshGraph) -> int:
    d = graph.diameter()
    if d is None:
        raise MeshError("graph is disconnected (infinite diameter)")
    return d


# ---------------------------------------------------------------------------
# node classification


@dataclass(frozen=True)
class NodeClassification:
    """Per-node boundary role, independent of any parameter draw."""

    tags: np.ndarray      # (N,) int8, see TAG_NAMES
    on_mub: np.ndarray    # (N,) bool
    mub_order: np.ndarray  # (p_b,) node indices in canonical boundary order
    experiment: str

    def __post_init__(self):
        for arr in (self.tags, self.on_mub, self.mub_order):
            arr.flags.writeable = False

    @property
    def p_b(self):
        return int(self.mub_order.size)

    def loss_weights(self):
        """Per-node loss weights: 1 internal/only-Neumann, 0 only-Dirichlet,
        0.1 BC-switch."""
        lam = np.ones(self.tags.size)
        lam[self.tags == ONLY_DIRICHLET] = 0.0
        lam[self.tags == BC_SWITCH] = 0.1
        return lam


def classify_nodes(mesh: Mesh2D, experiment: str | None = None) -> NodeClassification:
    """Tag every node by its boundary role for the given experiment.

    A node incident to any fixed-Dirichlet edge is only-Dirichlet, no matter
    what else touches it (Dirichlet wins at segment junctions).  Remaining
    nodes on parametrized edges are only-Neumann for the diffusion experiment
    and BC-switch for the advection-diffusion one.
    """
    experiment = experiment or mesh.experiment
    if experiment not in EXPERIMENTS:
        raise MeshError(f"unknown experiment {experiment!r}")
    n = mesh.n_nodes
    touches_d = np.zeros(n, dtype=bool)
    touches_n = np.zeros(n, dtype=bool)
    touches_m = np.zeros(n, dtype=bool)
    for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        if m in _DIRICHLET_MARKERS:
            touches_d[[i, j]] = True
        elif m in _NEUMANN_MARKERS:
            touches_n[[i, j]] = True
        elif m in _MUB_MARKERS:
            touches_m[[i, j]] = True
        else:
            raise MeshError(f"unknown boundary marker {m!r}")

    tags = np.zeros(n, dtype=np.int8)
    on_mub = touches_m & ~touches_d
    mub_tag = ONLY_NEUMANN if experiment == "diffusion" else BC_SWITCH
    tags[touches_n] = ONLY_NEUMANN
    tags[on_mub] = mub_tag
    tags[touches_d] = ONLY_DIRICHLET

    order = _canonical_mub_order(mesh, experiment, on_mub)
    return NodeClassification(tags, on_mub, order, experiment)


def _canonical_mub_order(mesh, experiment, on_mub):
    idx = np.flatnonzero(on_mub)
    if idx.size == 0:
        return idx.astype(np.int64)
    pts = mesh.nodes[idx]
    if experiment == "diffusion":
        # counter-clockwise around the hole, starting at minimal polar angle
        ang = np.mod(np.arctan2(pts[:, 1] - HOLE_CENTER[1], pts[:, 0] - HOLE_CENTER[0]),
                     2.0 * math.pi)
        return idx[np.argsort(ang, kind="stable")].astype(np.int64)
    # advdiff: down the left side from y = 0.6, along the bottom, up the right
    tol = 1e-9
    left = idx[pts[:, 0] < tol]
    right = idx[pts[:, 0] > 1 - tol]
    bottom = idx[(pts[:, 1] < tol) & (pts[:, 0] >= tol) & (pts[:, 0] <= 1 - tol)]
    left = left[np.argsort(-mesh.nodes[left, 1], kind="stable")]
    bottom = bottom[np.argsort(mesh.nodes[bottom, 0], kind="stable")]
    right = right[np.argsort(mesh.nodes[right, 1], kind="stable")]
    return np.concatenate([left, bottom, right]).astype(np.int64)


# ---------------------------------------------------------------------------
# serialization


def mesh_to_json(mesh: Mesh2D) -> str:
    doc = {
        "nodes": [[float(x), float(y)] for x, y in mesh.nodes],
        "triangles": [[int(a), int(b), int(c)] for a, b, c in mesh.triangles],
        "boundary_edges": [[[int(i), int(j)], m]
                           for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers)],
        "experiment": mesh.experiment,
    }
    return json.dumps(doc)


def mesh_from_json(text: str) -> Mesh2D:
    doc = json.loads(text)
    edges = np.array([e for e, _ in doc["boundary_edges"]], dtype=np.int64)
    markers = tuple(m for _, m in doc["boundary_edges"])
    mesh = Mesh2D(
        np.array(doc["nodes"], dtype=np.float64),
        np.array(doc["triangles"], dtype=np.int64),
        edges, markers, doc["experiment"],
    )
    validate_mesh(mesh)
    return mesh


def write_mesh(mesh: Mesh2D, path):
    with open(path, "w") as f:
        f.write(mesh_to_json(mesh))


def read_mesh(path) -> Mesh2D:
    with open(path) as f:
        return mesh_from_json(f.read())


def mesh_hash(mesh: Mesh2D) -> bytes:
    """SHA-256 digest of the mesh's canonical JSON form (32 bytes)."""
    return hashlib.sha256(mesh_to_json(mesh).encode()).digest()
