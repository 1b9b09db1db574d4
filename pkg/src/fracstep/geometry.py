"""Meshes, nodal fields and integration primitives.

Only P1 (piecewise affine) elements on intervals and triangles are
supported. Strains are stored in Mandel notation, so in 2D a symmetric
tensor ``e`` is the vector ``(e11, e22, sqrt(2) e12)`` and the Frobenius
product ``e:f`` is a plain dot product.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import InvalidArgument

SQRT2 = np.sqrt(2.0)

# Degree-5 Gauss rule on [0, 1], stored as barycentric weights (N0, N1).
_G3 = np.array([0.5 - np.sqrt(15.0) / 10.0, 0.5, 0.5 + np.sqrt(15.0) / 10.0])
_QUAD_1D = (
    np.stack([1.0 - _G3, _G3], axis=1),
    np.array([5.0, 8.0, 5.0]) / 18.0,
)

# Dunavant degree-4 rule on the reference triangle (weights sum to one).
_a, _b = 0.44594849091596488632, 0.091576213509770743460
_QUAD_2D = (
    np.array(
        [
            [1 - 2 * _a, _a, _a],
            [_a, 1 - 2 * _a, _a],
            [_a, _a, 1 - 2 * _a],
            [1 - 2 * _b, _b, _b],
            [_b, 1 - 2 * _b, _b],
            [_b, _b, 1 - 2 * _b],
        ]
    ),
    np.array([0.22338158967801146570] * 3 + [0.10995174365532186764] * 3),
)


def n_sym(dim: int) -> int:
    """Number of independent components of a symmetric dim x dim tensor."""
    return 1 if dim == 1 else 3


@dataclass(frozen=True, eq=False)
class Mesh:
    """Simplicial mesh of an interval or a rectangle.

    Attributes
    ----------
    dim : int
        Spatial dimension, 1 or 2.
    nodes : ndarray, shape (n_nodes, dim)
    cells : ndarray of int, shape (n_cells, dim + 1)
    boundary_facets : ndarray of int, shape (n_facets, dim)
        Vertex indices of each boundary facet (a single node in 1D).
    facet_normals : ndarray, shape (n_facets, dim)
        Outward unit normals.
    facet_tags : tuple of str
        Side name of each facet: ``left``/``right`` (1D) plus
        ``bottom``/``top`` (2D).
    cell_measures : ndarray, shape (n_cells,)
    """

    dim: int
    nodes: np.ndarray
    cells: np.ndarray
    boundary_facets: np.ndarray
    facet_normals: np.ndarray
    facet_tags: tuple
    cell_measures: np.ndarray

    def __post_init__(self):
        if self.cells.min() < 0 or self.cells.max() >= len(self.nodes):
            raise InvalidArgument("cell vertex index out of range")
        if np.any(self.cell_measures <= 0):
            raise InvalidArgument("degenerate cell with nonpositive measure")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_facets(self) -> int:
        return len(self.boundary_facets)

    @property
    def nsym(self) -> int:
        return n_sym(self.dim)

    @cached_property
    def facet_measures(self) -> np.ndarray:
        """Facet lengths in 2D; counting measure (1 per endpoint) in 1D."""
        if self.dim == 1:
            return np.ones(self.n_facets)
        p = self.nodes[self.boundary_facets]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    @cached_property
    def quadrature(self):
        """Reference barycentric points (nq, dim+1) and weights (nq,)."""
        return _QUAD_1D if self.dim == 1 else _QUAD_2D

    @cached_property
    def qweights(self) -> np.ndarray:
        """Physical quadrature weights, shape (n_cells, nq)."""
        return self.cell_measures[:, None] * self.quadrature[1][None, :]

    @cached_property
    def basis_grads(self) -> np.ndarray:
        """Constant gradients of the P1 hat functions, (n_cells, dim+1, dim)."""
        x = self.nodes[self.cells]
        if self.dim == 1:
            h = x[:, 1, 0] - x[:, 0, 0]
            g = np.stack([-1.0 / h, 1.0 / h], axis=1)
            return g[:, :, None]
        # Jacobian of the affine map from the reference triangle.
        J = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)
        Jinv_T = np.linalg.inv(J).transpose(0, 2, 1)
        ref = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        return np.einsum("cij,aj->cai", Jinv_T, ref)

    @cached_property
    def strain_matrix(self) -> np.ndarray:
        """Map from element displacements to Mandel strain, (n_cells, nsym, nv*dim).

        Element displacement dofs are ordered node-major: ``u[a*dim + i]``.
        """
        G = self.basis_grads
        nc, nv = G.shape[:2]
        B = np.zeros((nc, self.nsym, nv * self.dim))
        if self.dim == 1:
            B[:, 0, :] = G[:, :, 0]
            return B
        for a in range(nv):
            B[:, 0, 2 * a] = G[:, a, 0]
            B[:, 1, 2 * a + 1] = G[:, a, 1]
            B[:, 2, 2 * a] = G[:, a, 1] / SQRT2
            B[:, 2, 2 * a + 1] = G[:, a, 0] / SQRT2
        return B

    @cached_property
    def lumped_mass(self) -> np.ndarray:
        """Nodal volumes (row sums of the consistent mass matrix)."""
        m = np.zeros(self.n_nodes)
        np.add.at(m, self.cells, (self.cell_measures / (self.dim + 1))[:, None])
        return m

    def facets_tagged(self, tag: str) -> np.ndarray:
        return np.array([i for i, t in enumerate(self.facet_tags) if t == tag], dtype=int)

    def nodes_tagged(self, tag: str) -> np.ndarray:
        """Nodes lying on the boundary side ``tag``."""
        f = self.facets_tagged(tag)
        if len(f) == 0:
            raise InvalidArgument(f"unknown boundary side {tag!r}")
        return np.unique(self.boundary_facets[f])

    def at_quadrature(self, nodal: np.ndarray) -> np.ndarray:
        """Interpolate nodal values (n_nodes, ...) to quadrature points (n_cells, nq, ...)."""
        Nq = self.quadrature[0]
        return np.einsum("qa,ca...->cq...", Nq, nodal[self.cells])

    def gradient(self, nodal: np.ndarray) -> np.ndarray:
        """Cellwise gradient of a P1 field, (n_cells, [ncomp,] dim)."""
        G = self.basis_grads
        vals = nodal[self.cells]
        if vals.ndim == 2:
            return np.einsum("cai,ca->ci", G, vals)
        return np.einsum("cai,cak->cki", G, vals)

    def strain(self, u: np.ndarray) -> np.ndarray:
        """Mandel strain of a nodal displacement (n_nodes, dim), per cell (n_cells, nsym)."""
        ue = u[self.cells].reshape(self.n_cells, -1)
        return np.einsum("csk,ck->cs", self.strain_matrix, ue)


@dataclass
class NodalField:
    """Flat array of nodal values, ``components_per_node`` values per node."""

    components_per_node: int
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).ravel()
        if self.components_per_node < 1 or len(self.values) % self.components_per_node:
            raise InvalidArgument("values length is not a multiple of components_per_node")

    @classmethod
    def from_array(cls, arr) -> "NodalField":
        arr = np.asarray(arr, dtype=float)
        k = 1 if arr.ndim == 1 else arr.shape[1]
        return cls(k, arr.ravel())

    @property
    def n_nodes(self) -> int:
        return len(self.values) // self.components_per_node

    def as_array(self) -> np.ndarray:
        if self.components_per_node == 1:
            return self.values.copy()
        return self.values.reshape(-1, self.components_per_node).copy()

    def check(self, mesh: Mesh, components: int | None = None) -> None:
        if self.n_nodes != mesh.n_nodes:
            raise InvalidArgument(
                f"field has {self.n_nodes} nodes, mesh has {mesh.n_nodes}"
            )
        if components is not None and self.components_per_node != components:
            raise InvalidArgument(
                f"expected {components} components per node, got {self.components_per_node}"
            )


def interval_mesh(n_cells: int, length: float) -> Mesh:
    """Uniform mesh of ``[0, length]`` with ``n_cells`` segments."""
    if int(n_cells) != n_cells or n_cells < 1:
        raise InvalidArgument(f"n_cells must be a positive integer, got {n_cells}")
    if not length > 0:
        raise InvalidArgument(f"length must be positive, got {length}")
    n = int(n_cells)
    x = np.linspace(0.0, length, n + 1)
    cells = np.stack([np.arange(n), np.arange(1, n + 1)], axis=1)
    return Mesh(
        dim=1,
        nodes=x[:, None],
        cells=cells,
        boundary_facets=np.array([[0], [n]]),
        facet_normals=np.array([[-1.0], [1.0]]),
        facet_tags=("left", "right"),
        cell_measures=np.diff(x),
    )


def grid_mesh(nx: int, ny: int, lx: float, ly: float) -> Mesh:
    """Rectangle ``[0,lx] x [0,ly]`` cut into ``2*nx*ny`` triangles.

    Every rectangle is split along its lower-left to upper-right diagonal.
    """
    for name, v in (("nx", nx), ("ny", ny)):
        if int(v) != v or v < 1:
            raise InvalidArgument(f"{name} must be a positive integer, got {v}")
    if not (lx > 0 and ly > 0):
        raise InvalidArgument(f"side lengths must be positive, got {lx}, {ly}")
    nx, ny = int(nx), int(ny)
    xs = np.linspace(0.0, lx, nx + 1)
    ys = np.linspace(0.0, ly, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)

    def idx(i, j):
        return j * (nx + 1) + i

    cells = []
    for j in range(ny):
        for i in range(nx):
            p0, p1, p2, p3 = idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)
            cells.append((p0, p1, p2))
            cells.append((p0, p2, p3))
    cells = np.array(cells)

    facets, normals, tags = [], [], []
    for i in range(nx):
        facets.append((idx(i, 0), idx(i + 1, 0)))
        normals.append((0.0, -1.0))
        tags.append("bottom")
    for j in range(ny):
        facets.append((idx(nx, j), idx(nx, j + 1)))
        normals.append((1.0, 0.0))
        tags.append("right")
    for i in range(nx):
        facets.append((idx(i + 1, ny), idx(i, ny)))
        normals.append((0.0, 1.0))
        tags.append("top")
    for j in range(ny):
        facets.append((idx(0, j + 1), idx(0, j)))
        normals.append((-1.0, 0.0))
        tags.append("left")

    x = nodes[cells]
    e1, e2 = x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]
    area = 0.5 * (e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return Mesh(
        dim=2,
        nodes=nodes,
        cells=cells,
        boundary_facets=np.array(facets),
        facet_normals=np.array(normals),
        facet_tags=tuple(tags),
        cell_measures=area,
    )


def integrate_cell(field: NodalField, mesh: Mesh) -> float:
    """Exact integral over the domain of the P1 interpolant of a scalar field."""
    field.check(mesh, components=1)
    v = field.values
    return float(np.sum(mesh.cell_measures * v[mesh.cells].mean(axis=1)))


def integrate_boundary(field: NodalField, mesh: Mesh) -> float:
    """Exact boundary integral of the trace of a scalar P1 field.

    In 1D the boundary carries the counting measure, so the result is the
    sum of the two endpoint values.
    """
    field.check(mesh, components=1)
    v = field.values[mesh.boundary_facets]
    return float(np.sum(mesh.facet_measures * v.mean(axis=1)))
