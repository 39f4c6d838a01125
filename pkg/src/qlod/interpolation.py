"""Coarse/fine transfer and the L2-projection quasi-interpolation.

``I_H v`` is the L2 projection of a fine function onto the coarse space with
zero boundary values, ``I_H v = M_H^{-1} C v``. Its kernel, the fine-scale
space, is characterised by ``C w = 0``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .fem import assemble_mass
from .mesh import MeshPair, Patch


def prolongation_1d(n_coarse: int, ratio: int) -> sparse.csr_matrix:
    n_fine = n_coarse * ratio
    ix = np.arange(n_fine + 1)
    c = np.minimum(ix // ratio, n_coarse - 1)
    t = (ix - c * ratio) / ratio
    rows = np.concatenate([ix, ix])
    cols = np.concatenate([c, c + 1])
    vals = np.concatenate([1.0 - t, t])
    keep = vals != 0.0
    return sparse.csr_matrix(
        (vals[keep], (rows[keep], cols[keep])), shape=(n_fine + 1, n_coarse + 1)
    )


def prolongation_matrix(pair: MeshPair) -> sparse.csr_matrix:
    """Fine nodal values of every coarse hat (all nodes, exact for nested meshes)."""
    p1 = prolongation_1d(pair.coarse.n, pair.ratio)
    return sparse.kron(p1, p1, format="csr")


@dataclass
class TransferOperators:
    """``P`` maps coarse to fine nodal vectors (all nodes). ``C`` is the cross
    mass over coarse free rows and fine free columns, ``M_H`` the coarse mass on
    free nodes."""

    pair: MeshPair
    P: sparse.csr_matrix
    C: sparse.csr_matrix
    M_H: sparse.csc_matrix
    _M_H_solve: object = field(repr=False, default=None)

    def prolong(self, w: np.ndarray) -> np.ndarray:
        return self.P @ w

    @property
    def P_free(self) -> sparse.csr_matrix:
        """Prolongation restricted to fine free rows and coarse free columns."""
        fine, coarse = self.pair.fine, self.pair.coarse
        return self.P[fine.free_nodes][:, coarse.free_nodes]


def build_transfer(pair: MeshPair) -> TransferOperators:
    fine, coarse = pair.fine, pair.coarse
    P = prolongation_matrix(pair)
    M_h = assemble_mass(fine)
    C = (P.T @ M_h).tocsr()[coarse.free_nodes][:, fine.free_nodes]
    C.sort_indices()
    M_H = assemble_mass(coarse).tocsc()[coarse.free_nodes][:, coarse.free_nodes]
    solve = spla.factorized(M_H.tocsc()) if M_H.shape[0] else None
    return TransferOperators(pair, P, C.tocsr(), M_H.tocsc(), solve)


def interpolate(tr: TransferOperators, v: np.ndarray) -> np.ndarray:
    """L2 projection of the fine nodal vector ``v`` onto the coarse space."""
    fine, coarse = tr.pair.fine, tr.pair.coarse
    out = np.zeros(coarse.n_nodes)
    if tr._M_H_solve is not None:
        out[coarse.free_nodes] = tr._M_H_solve(tr.C @ v[fine.free_nodes])
    return out


@dataclass(frozen=True)
class PatchConstraints:
    """Rows of ``C`` that act on functions supported in a patch.

    ``coarse_rows`` index the coarse free nodes, ``fine_cols`` the fine free
    nodes (patch interior). ``matrix`` is ``C[coarse_rows][:, fine_cols]``.
    """

    coarse_rows: np.ndarray
    fine_cols: np.ndarray
    matrix: sparse.csr_matrix


def kernel_constraint_rows(tr: TransferOperators, patch: Patch) -> PatchConstraints:
    coarse, fine = tr.pair.coarse, tr.pair.fine
    i0, i1, j0, j1 = patch.box
    ix, iy = np.meshgrid(np.arange(i0, i1 + 1), np.arange(j0, j1 + 1), indexing="xy")
    rows = coarse.free_index[coarse.node_index(ix.ravel(), iy.ravel())]
    rows = rows[rows >= 0]
    cols = fine.free_index[patch.fine_interior_nodes]
    block = tr.C[rows][:, cols].tocsr()
    # a coarse hat touching the patch only along its boundary gives a zero row
    nonzero = np.diff(block.indptr) > 0
    if not nonzero.all():
        rows, block = rows[nonzero], block[nonzero]
    return PatchConstraints(rows, cols, block.tocsr())
