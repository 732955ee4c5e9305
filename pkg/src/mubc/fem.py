"""P1 finite elements on triangular meshes.

Provides the Galerkin mass and stiffness matrices over the full node set (no
boundary elimination, since the evaluation metrics need them whole), the two
experiment solvers, and a manufactured-solution convergence check.

Element formulas are exact for P1: the element mass matrix is
``area/12 * [[2,1,1],[1,2,1],[1,1,2]]``, gradients are constant per element,
and boundary loads integrate a constant flux against the linear trace
(``mu1 * edge_length / 2`` per endpoint).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import (BC_SWITCH, M_MUB_CIRCLE, ONLY_DIRICHLET, Mesh2D, MeshError,
                   NodeClassification)


class FemError(RuntimeError):
    """Raised for assembly failures or solver non-convergence."""


class PecletWarning(UserWarning):
    """Element Peclet number exceeds 2: advection-dominated, unstabilized."""


@dataclass
class SparseMatrix:
    """Compressed-row sparse matrix (float64), optionally flagged symmetric."""

    shape: tuple
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    symmetric: bool = False
    _scipy: object = field(default=None, repr=False)

    @classmethod
    def from_scipy(cls, mat, check_symmetric=False):
        csr = mat.tocsr()
        csr.sum_duplicates()
        csr.sort_indices()
        symmetric = False
        if check_symmetric:
            diff = abs(csr - csr.T)
            symmetric = diff.max() <= 1e-12 * max(1.0, abs(csr).max()) if diff.nnz else True
            if not symmetric:
                raise FemError("matrix expected symmetric but is not")
        out = cls((int(csr.shape[0]), int(csr.shape[1])), csr.indptr, csr.indices,
                  csr.data, symmetric)
        out._scipy = csr
        return out

    def to_scipy(self):
        if self._scipy is None:
            self._scipy = sp.csr_matrix((self.data, self.indices, self.indptr),
                                        shape=self.shape)
        return self._scipy

    def matvec(self, x):
        return self.to_scipy() @ np.asarray(x, dtype=np.float64)

    def quadratic_form(self, e):
        e = np.asarray(e, dtype=np.float64)
        return float(e @ self.matvec(e))

    def row_sums(self):
        return np.asarray(self.to_scipy().sum(axis=1)).ravel()

    def to_coordinate_text(self):
        """Plain 'row col value' lines for debugging."""
        coo = self.to_scipy().tocoo()
        lines = [f"{i} {j} {v!r}" for i, j, v in zip(coo.row, coo.col, coo.data)]
        return "\n".join(lines)


@dataclass(frozen=True)
class FemSolution:
    """Nodal solution values together with the parameter draw behind them."""

    values: np.ndarray
    params: dict

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise FemError("non-finite nodal values")
        self.values.flags.writeable = False


# ---------------------------------------------------------------------------
# assembly


def _element_geometry(mesh):
    p = mesh.nodes[mesh.triangles]  # (T, 3, 2)
    x, y = p[..., 0], p[..., 1]
    b = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1)
    c = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1)
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0])
                  - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    return b, c, area


def _scatter(mesh, element_mats):
    tris = mesh.triangles
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    vals = element_mats.reshape(len(tris), 9).ravel()
    n = mesh.n_nodes
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def assemble_p1(mesh: Mesh2D):
    """Assemble (mass, stiffness) over the whole node set."""
    b, c, area = _element_geometry(mesh)
    if np.any(area <= 0):
        raise FemError("degenerate (non-positive area) triangle")
    me = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0
    mass_el = area[:, None, None] * me[None, :, :]
    stiff_el = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) \
        / (4.0 * area)[:, None, None]
    mass = SparseMatrix.from_scipy(_scatter(mesh, mass_el), check_symmetric=True)
    stiff = SparseMatrix.from_scipy(_scatter(mesh, stiff_el), check_symmetric=True)
    return mass, stiff


def advection_matrix(mesh: Mesh2D, alpha):
    """Assemble C with C[i,j] ~ integral of phi_i (alpha . grad phi_j)."""
    b, c, area = _element_geometry(mesh)
    if np.any(area <= 0):
        raise FemError("degenerate (non-positive area) triangle")
    ax, ay = float(alpha[0]), float(alpha[1])
    col = (ax * b + ay * c) / 6.0  # (T, 3), same for every test row
    el = np.repeat(col[:, None, :], 3, axis=1)
    return SparseMatrix.from_scipy(_scatter(mesh, el))


# ---------------------------------------------------------------------------
# linear solves with strong Dirichlet elimination


def _solve_reduced(system: sp.csr_matrix, rhs, dirichlet_mask, dirichlet_values):
    n = system.shape[0]
    u = np.zeros(n)
    u[dirichlet_mask] = dirichlet_values[dirichlet_mask]
    free = ~dirichlet_mask
    if not np.any(free):
        return u
    a_ff = system[free][:, free].tocsc()
    rhs_f = rhs[free] - system[free][:, dirichlet_mask] @ u[dirichlet_mask]
    if not np.any(rhs_f):
        return u
    u_f = spla.spsolve(a_ff, rhs_f)
    res = np.linalg.norm(a_ff @ u_f - rhs_f)
    ref = np.linalg.norm(rhs_f)
    if res > 1e-10 * max(ref, 1e-300):
        raise FemError(f"linear solve did not converge: relative residual {res / ref:.3e}")
    u[free] = u_f
    return u


def _node_flags(classification: NodeClassification, mu_b):
    mu_b = np.asarray(mu_b)
    if mu_b.shape != (classification.p_b,):
        raise FemError(f"mu_b must have length p_b={classification.p_b}, got {mu_b.shape}")
    if not np.all(np.isin(mu_b, (0, 1))):
        raise FemError("mu_b entries must be 0 or 1")
    flags = np.zeros(classification.tags.size, dtype=bool)
    flags[classification.mub_order] = mu_b.astype(bool)
    return flags


def solve_diffusion(mesh: Mesh2D, classification: NodeClassification, mu_b,
                    mu1: float) -> FemSolution:
    """Laplace problem with a parametrized Neumann flux on the inner circle.

    The flux ``mu1`` acts on every circle edge whose BOTH endpoints carry
    flag 1 in ``mu_b``; the rest of the circle and the outer sides get
    homogeneous Neumann data, the outer bottom/top are clamped to zero.
    """
    if not (0.0 < mu1 <= 1.0):
        raise FemError(f"mu1 must lie in (0, 1], got {mu1}")
    flags = _node_flags(classification, mu_b)
    _, stiff = assemble_p1(mesh)
    load = np.zeros(mesh.n_nodes)
    for (i, j), m in zip(mesh.boundary_edges, mesh.boundary_markers):
        if m == M_MUB_CIRCLE and flags[i] and flags[j]:
            length = float(np.hypot(*(mesh.nodes[j] - mesh.nodes[i])))
            load[i] += 0.5 * mu1 * length
            load[j] += 0.5 * mu1 * length
    dirichlet = classification.tags == ONLY_DIRICHLET
    u = _solve_reduced(stiff.to_scipy(), load, dirichlet, np.zeros(mesh.n_nodes))
    return FemSolution(u, {"experiment": "diffusion", "mu_b": np.asarray(mu_b).tolist(),
                           "mu1": float(mu1)})


def solve_advection_diffusion(mesh: Mesh2D, classification: NodeClassification,
                              mu_b, mu1: float, mu2: float) -> FemSolution:
    """Advection-diffusion with unit forcing and mixed parametrized BCs.

    ``mu_b`` flags the Neumann nodes on the parametrized boundary; every
    other parametrized node and the whole fixed boundary are homogeneous
    Dirichlet.  Neumann data is homogeneous, so the flags only decide which
    nodes are eliminated.
    """
    if not (1e-3 <= mu1 <= 100.0):
        raise FemError(f"mu1 must lie in [1e-3, 100], got {mu1}")
    if not (-3.0 * np.pi / 4.0 - 1e-12 <= mu2 <= -np.pi / 4.0 + 1e-12):
        raise FemError(f"mu2 must lie in [-3pi/4, -pi/4], got {mu2}")
    flags = _node_flags(classification, mu_b)
    alpha = (np.cos(mu2), np.sin(mu2))
    mass, stiff = assemble_p1(mesh)
    conv = advection_matrix(mesh, alpha)
    system = (mu1 * stiff.to_scipy() + conv.to_scipy()).tocsr()
    load = mass.matvec(np.ones(mesh.n_nodes))

    p = mesh.nodes[mesh.triangles]
    h_el = max(np.linalg.norm(p[:, a] - p[:, b], axis=1).max()
               for a, b in ((0, 1), (1, 2), (2, 0)))
    peclet = h_el / (2.0 * mu1)
    if peclet > 2.0:
        warnings.warn(f"element Peclet number {peclet:.2f} exceeds 2; "
                      "solution may oscillate (no stabilization)", PecletWarning,
                      stacklevel=2)

    dirichlet = (classification.tags == ONLY_DIRICHLET) | \
        ((classification.tags == BC_SWITCH) & ~flags)
    u = _solve_reduced(system, load, dirichlet, np.zeros(mesh.n_nodes))
    return FemSolution(u, {"experiment": "advdiff", "mu_b": np.asarray(mu_b).tolist(),
                           "mu1": float(mu1), "mu2": float(mu2)})


def solve_poisson(mesh: Mesh2D, dirichlet_fn, source_fn) -> np.ndarray:
    """Poisson solve with Dirichlet data on every boundary node.

    Used by solver verification; the load is the consistent approximation
    M f(nodes).
    """
    mass, stiff = assemble_p1(mesh)
    x, y = mesh.nodes[:, 0], mesh.nodes[:, 1]
    load = mass.matvec(source_fn(x, y))
    on_boundary = np.zeros(mesh.n_nodes, dtype=bool)
    on_boundary[mesh.boundary_edges.ravel()] = True
    values = np.zeros(mesh.n_nodes)
    values[on_boundary] = dirichlet_fn(x[on_boundary], y[on_boundary])
    return _solve_reduced(stiff.to_scipy(), load, on_boundary, values)


# ---------------------------------------------------------------------------
# verification


def observed_order(hs, errors):
    """Least-squares slope of log error against log h."""
    hs = np.asarray(hs, dtype=np.float64)
    errors = np.asarray(errors, dtype=np.float64)
    return float(np.polyfit(np.log(hs), np.log(errors), 1)[0])


def manufactured_convergence(experiment="plain", hs=(1 / 8, 1 / 16, 1 / 32)):
    """Observed L2 order for u = sin(pi x) sin(pi y) on the unit square."""
    if len(hs) < 3:
        raise MeshError("at least 3 refinement levels required")
    from .mesh import generate_mesh

    u_exact = lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
    source = lambda x, y: 2.0 * np.pi ** 2 * u_exact(x, y)
    actual_h, errs = [], []
    for h in hs:
        mesh = generate_mesh(experiment, h)
        mass, _ = assemble_p1(mesh)
        u = solve_poisson(mesh, u_exact, source)
        e = u - u_exact(mesh.nodes[:, 0], mesh.nodes[:, 1])
        errs.append(np.sqrt(max(mass.quadratic_form(e), 0.0)))
        spacing = np.hypot(*(mesh.nodes[mesh.triangles[0][1]]
                             - mesh.nodes[mesh.triangles[0][0]]))
        actual_h.append(spacing)
    return observed_order(actual_h, errs)
