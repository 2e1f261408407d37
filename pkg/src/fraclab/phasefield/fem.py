"""Bilinear quadrilateral finite elements on a uniform Cartesian grid.

Everything geometric is identical across elements (the grid is uniform), so
shape-function values, gradients, and per-quadrature-point base matrices are
computed once and reused by vectorized assembly. Quadrature is 2x2 Gauss.

Degree-of-freedom layout matches core: node n = j*(nx+1)+i, displacement
dofs (2n, 2n+1). Element-local vector ordering is [u1x,u1y,...,u4x,u4y] for
corners (i,j), (i+1,j), (i+1,j+1), (i,j+1).
"""
from __future__ import annotations

import numpy as np
from scipy import sparse

from ..core import CartesianGrid

GAUSS = 1.0 / np.sqrt(3.0)
QP_REF = np.array([(-GAUSS, -GAUSS), (GAUSS, -GAUSS), (GAUSS, GAUSS), (-GAUSS, GAUSS)])


def shape_functions(xi: float, eta: float) -> np.ndarray:
    return 0.25 * np.array(
        [
            (1 - xi) * (1 - eta),
            (1 + xi) * (1 - eta),
            (1 + xi) * (1 + eta),
            (1 - xi) * (1 + eta),
        ]
    )


def shape_gradients(xi: float, eta: float, dx: float, dy: float) -> np.ndarray:
    """(2, 4) physical gradients [d/dx; d/dy] of the four shape functions."""
    dN_dxi = 0.25 * np.array([-(1 - eta), (1 - eta), (1 + eta), -(1 + eta)])
    dN_deta = 0.25 * np.array([-(1 - xi), -(1 + xi), (1 + xi), (1 - xi)])
    return np.stack([dN_dxi * 2.0 / dx, dN_deta * 2.0 / dy])


class GridFEM:
    """Precomputed mesh topology and quadrature tables for one grid."""

    def __init__(self, grid: CartesianGrid):
        self.grid = grid
        nx, ny = grid.nx, grid.ny
        self.n_elems = nx * ny
        self.n_nodes = grid.n_nodes
        self.n_dofs = 2 * self.n_nodes
        self.w_q = grid.dx * grid.dy / 4.0  # physical quadrature weight, all points

        # element -> 4 corner node ids, row-major elements
        ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
        i, j = ii.ravel(), jj.ravel()
        stride = nx + 1
        self.enodes = np.column_stack(
            [j * stride + i, j * stride + i + 1, (j + 1) * stride + i + 1, (j + 1) * stride + i]
        )
        self.edofs = np.empty((self.n_elems, 8), dtype=np.int64)
        self.edofs[:, 0::2] = 2 * self.enodes
        self.edofs[:, 1::2] = 2 * self.enodes + 1

        # quadrature tables: N (4qp, 4nodes) and B (4qp, 3, 8) for voigt strain
        self.N = np.stack([shape_functions(xi, eta) for xi, eta in QP_REF])
        self.B = np.zeros((4, 3, 8))
        self.dN = np.zeros((4, 2, 4))
        for q, (xi, eta) in enumerate(QP_REF):
            g = shape_gradients(xi, eta, grid.dx, grid.dy)
            self.dN[q] = g
            self.B[q, 0, 0::2] = g[0]
            self.B[q, 1, 1::2] = g[1]
            self.B[q, 2, 0::2] = g[1]
            self.B[q, 2, 1::2] = g[0]

        # sparsity pattern index arrays for fast COO assembly
        self._rows_k = np.repeat(self.edofs, 8, axis=1).ravel()
        self._cols_k = np.tile(self.edofs, (1, 8)).ravel()
        self._rows_s = np.repeat(self.enodes, 4, axis=1).ravel()
        self._cols_s = np.tile(self.enodes, (1, 4)).ravel()

        # physical quadrature point coordinates (n_elems, 4, 2)
        corners = grid.node_coords()[self.enodes]  # (n_e, 4, 2)
        self.qp_coords = np.einsum("qa,eac->eqc", self.N, corners)

    # ------------------------------------------------------------------ #
    # Field evaluation at quadrature points
    # ------------------------------------------------------------------ #

    def nodal_at_qp(self, nodal: np.ndarray) -> np.ndarray:
        """(n_elems, 4qp) values of a nodal scalar field at quadrature points."""
        return np.einsum("qa,ea->eq", self.N, nodal[self.enodes])

    def strain_at_qp(self, u: np.ndarray) -> np.ndarray:
        """(n_elems, 4qp, 3) engineering-Voigt strain [exx, eyy, gxy]."""
        ue = u[self.edofs]  # (n_e, 8)
        return np.einsum("qci,ei->eqc", self.B, ue)

    # ------------------------------------------------------------------ #
    # Assembly
    # ------------------------------------------------------------------ #

    def assemble_stiffness(self, d_matrices: np.ndarray, factors: np.ndarray) -> sparse.csr_matrix:
        """Global stiffness sum_e sum_q w*factor[e,q] * B^T D[e,q] B.

        d_matrices: (n_e, 4, 3, 3) or (3, 3) shared; factors: (n_e, 4)
        multiplicative per-point scaling (e.g. stiffness degradation).
        """
        if d_matrices.ndim == 2:
            kq = np.einsum("qai,ab,qbj->qij", self.B, d_matrices, self.B) * self.w_q
            ke = np.einsum("eq,qij->eij", factors, kq)
        else:
            wd = d_matrices * (factors[..., None, None] * self.w_q)
            ke = np.einsum("qai,eqab,qbj->eij", self.B, wd, self.B)
        return sparse.coo_matrix(
            (ke.ravel(), (self._rows_k, self._cols_k)), shape=(self.n_dofs, self.n_dofs)
        ).tocsr()

    def internal_force(self, stresses: np.ndarray) -> np.ndarray:
        """Assembled nodal force of per-point Voigt stresses (n_e, 4, 3)."""
        fe = np.einsum("qci,eqc->ei", self.B, stresses) * self.w_q
        f = np.zeros(self.n_dofs)
        np.add.at(f, self.edofs.ravel(), fe.ravel())
        return f

    def lumped_mass(self, density: float) -> np.ndarray:
        """Row-sum lumped mass diagonal (per dof), uniform density."""
        m_node = np.zeros(self.n_nodes)
        np.add.at(m_node, self.enodes.ravel(), density * self.grid.dx * self.grid.dy / 4.0)
        m = np.empty(self.n_dofs)
        m[0::2] = m_node
        m[1::2] = m_node
        return m

    def assemble_scalar_laplacian(self) -> sparse.csr_matrix:
        """Global int grad(N_a) . grad(N_b); constant in time, assembled once."""
        le = np.einsum("qda,qdb->ab", self.dN, self.dN) * self.w_q
        data = np.tile(le.ravel(), self.n_elems)
        return sparse.coo_matrix(
            (data, (self._rows_s, self._cols_s)), shape=(self.n_nodes, self.n_nodes)
        ).tocsr()

    def lumped_scalar(self, point_values: np.ndarray) -> np.ndarray:
        """Row-sum lumped nodal vector of a per-quadrature-point density.

        Nonnegative weights w*N preserve sign, which is what guarantees the
        discrete maximum principle for the damage solve.
        """
        contrib = np.einsum("qa,eq->ea", self.N, point_values) * self.w_q
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.enodes.ravel(), contrib.ravel())
        return out

    # ------------------------------------------------------------------ #
    # Boundary node sets
    # ------------------------------------------------------------------ #

    def boundary_nodes(self, side: str) -> np.ndarray:
        nx, ny = self.grid.nx, self.grid.ny
        stride = nx + 1
        if side == "left":
            return np.arange(ny + 1) * stride
        if side == "right":
            return np.arange(ny + 1) * stride + nx
        if side == "bottom":
            return np.arange(nx + 1)
        if side == "top":
            return ny * stride + np.arange(nx + 1)
        raise ValueError(f"unknown side {side!r}")
