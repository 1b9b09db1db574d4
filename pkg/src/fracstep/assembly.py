"""Finite-element assembly of mass, weighted stiffness and load vectors."""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument
from .geometry import Mesh, NodalField


def _symmetrize(A: sp.spmatrix) -> sp.csr_matrix:
    # (a + b)/2 is commutative in floating point, so the result is exactly symmetric.
    A = A.tocsr()
    return ((A + A.T) * 0.5).tocsr()


def _scatter(mesh: Mesh, elem: np.ndarray, components: int) -> sp.csr_matrix:
    """Assemble scalar element matrices (nc, nv, nv) into a block-diagonal matrix.

    Dofs are ordered node-major: ``node * components + comp``.
    """
    nc, nv, _ = elem.shape
    n = mesh.n_nodes * components
    rows, cols, vals = [], [], []
    for k in range(components):
        dof = mesh.cells * components + k
        rows.append(np.repeat(dof, nv, axis=1).ravel())
        cols.append(np.tile(dof, (1, nv)).ravel())
        vals.append(elem.ravel())
    A = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )
    return _symmetrize(A)


def element_mass(mesh: Mesh) -> np.ndarray:
    """Consistent P1 element mass matrices, shape (n_cells, nv, nv)."""
    nv = mesh.dim + 1
    ref = (np.ones((nv, nv)) + np.eye(nv)) / ((nv) * (nv + 1))
    return mesh.cell_measures[:, None, None] * ref[None]


def assemble_mass(mesh: Mesh, components: int = 1) -> sp.csr_matrix:
    """Consistent P1 mass matrix, block-diagonal over ``components``."""
    if components < 1:
        raise InvalidArgument("components must be >= 1")
    return _scatter(mesh, element_mass(mesh), components)


def _coeff_at_quadrature(mesh: Mesh, coeff) -> np.ndarray:
    """Normalize a coefficient to shape (n_cells, nq, dim, dim)."""
    nc, nq, dim = mesh.n_cells, len(mesh.quadrature[1]), mesh.dim
    c = np.asarray(coeff, dtype=float)
    if c.ndim == 0:
        c = np.broadcast_to(c, (nc, nq))
    if c.shape == (nc, nq):
        return c[..., None, None] * np.eye(dim)
    if c.shape == (dim, dim):
        return np.broadcast_to(c, (nc, nq, dim, dim))
    if c.shape == (nc, nq, dim, dim):
        return c
    raise InvalidArgument(f"coefficient shape {c.shape} not understood")


def assemble_weighted_stiffness(mesh: Mesh, coeff=1.0, components: int = 1) -> sp.csr_matrix:
    """Stiffness matrix of ``-div(coeff grad .)`` with natural boundary conditions.

    ``coeff`` is a scalar, a constant (dim, dim) tensor, per-quadrature-point
    scalars (n_cells, nq), or tensors (n_cells, nq, dim, dim). It must be
    symmetric positive definite at every point.
    """
    K = _coeff_at_quadrature(mesh, coeff)
    if not np.allclose(K, np.swapaxes(K, -1, -2)):
        raise InvalidArgument("stiffness coefficient is not symmetric")
    eig = np.linalg.eigvalsh(K.reshape(-1, mesh.dim, mesh.dim))
    if eig.min() <= 0:
        raise InvalidArgument(
            f"stiffness coefficient is not positive definite (min eigenvalue {eig.min():.3e})"
        )
    Kbar = np.einsum("cq,cqij->cij", mesh.qweights, K)
    G = mesh.basis_grads
    elem = np.einsum("cai,cij,cbj->cab", G, Kbar, G)
    return _scatter(mesh, elem, components)


def boundary_mass(mesh: Mesh) -> sp.csr_matrix:
    """Mass matrix of the boundary trace space (counting measure in 1D)."""
    n = mesh.n_nodes
    F = mesh.boundary_facets
    if mesh.dim == 1:
        return sp.csr_matrix((np.ones(len(F)), (F[:, 0], F[:, 0])), shape=(n, n))
    L = mesh.facet_measures
    ref = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    elem = L[:, None, None] * ref
    rows = np.repeat(F, 2, axis=1).ravel()
    cols = np.tile(F, (1, 2)).ravel()
    return _symmetrize(sp.coo_matrix((elem.ravel(), (rows, cols)), shape=(n, n)))


def facet_load(mesh: Mesh, facet_values: np.ndarray) -> np.ndarray:
    """Nodal load of a piecewise-constant boundary field: int_Gamma g phi_i dS.

    ``facet_values`` has shape (n_facets,) or (n_facets, k).
    """
    g = np.asarray(facet_values, dtype=float)
    if g.shape[0] != mesh.n_facets:
        raise InvalidArgument(
            f"boundary field has {g.shape[0]} facet values, mesh has {mesh.n_facets} facets"
        )
    share = mesh.facet_measures / mesh.dim  # each facet vertex receives |F|/dim
    out = np.zeros((mesh.n_nodes,) + g.shape[1:])
    contrib = share.reshape((-1,) + (1,) * (g.ndim - 1)) * g
    for j in range(mesh.dim):
        np.add.at(out, mesh.boundary_facets[:, j], contrib)
    return out


def assemble_load(mesh: Mesh, bulk=None, surf=None) -> np.ndarray:
    """Nodal load vector ``int_Omega bulk phi_i dx + int_Gamma surf phi_i dS``.

    ``bulk`` is a nodal P1 field, shape (n_nodes,) or (n_nodes, k), integrated
    exactly. ``surf`` is piecewise constant on boundary facets, shape
    (n_facets,) or (n_facets, k). Either may be ``None``.
    """
    out = None
    if bulk is not None:
        b = np.asarray(bulk, dtype=float)
        if b.shape[0] != mesh.n_nodes:
            raise InvalidArgument(
                f"bulk field has {b.shape[0]} nodes, mesh has {mesh.n_nodes}"
            )
        M = assemble_mass(mesh)
        out = M @ b
    if surf is not None:
        s = facet_load(mesh, surf)
        if out is not None and s.shape != out.shape:
            raise InvalidArgument("bulk and surface loads have different component counts")
        out = s if out is None else out + s
    if out is None:
        return np.zeros(mesh.n_nodes)
    return out


def quadrature_eval(fields, mesh: Mesh, kernel):
    """Integrate ``kernel(*field_values)`` over the domain with the degree-4 rule.

    Each field is a :class:`NodalField` (or a nodal array) interpolated to the
    quadrature points; the kernel receives arrays of shape (n_cells, nq[, k])
    and returns (n_cells, nq) or (n_cells, nq, m).
    """
    vals = []
    for f in fields:
        if isinstance(f, NodalField):
            f.check(mesh)
            f = f.as_array()
        vals.append(mesh.at_quadrature(np.asarray(f, dtype=float)))
    out = np.asarray(kernel(*vals), dtype=float)
    w = mesh.qweights
    if out.ndim == 0:
        return float(out) * float(w.sum())
    res = np.einsum("cq,cq...->...", w, np.broadcast_to(out, w.shape + out.shape[2:]))
    return float(res) if res.ndim == 0 else res
