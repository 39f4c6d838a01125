"""Dense reference implementations used only by the tests.

Correctors here use a null-space basis of the constraints instead of Lagrange
multipliers, and identify patches geometrically from element midpoints.
"""
import numpy as np
import scipy.linalg as la

from qlod.fem import assemble_gradient_coupling, assemble_mass, assemble_stiffness
from qlod.mesh import MeshPair


def dense_prolongation(pair: MeshPair) -> np.ndarray:
    coarse, fine = pair.coarse, pair.fine
    xy = fine.node_coords
    P = np.zeros((fine.n_nodes, coarse.n_nodes))
    for i, (cx, cy) in enumerate(coarse.node_coords):
        P[:, i] = np.maximum(0, 1 - np.abs(xy[:, 0] - cx) / coarse.h) * np.maximum(
            0, 1 - np.abs(xy[:, 1] - cy) / coarse.h
        )
    return P


def patch_nodes(pair: MeshPair, T: int, k: int) -> np.ndarray:
    """Fine free nodes strictly inside the k-layer patch of T, found geometrically."""
    coarse, fine = pair.coarse, pair.fine
    cx, cy = coarse.element_midpoints[T]
    reach = (k + 0.5) * coarse.h
    lo_x, hi_x = max(cx - reach, 0.0), min(cx + reach, 1.0)
    lo_y, hi_y = max(cy - reach, 0.0), min(cy + reach, 1.0)
    xy = fine.node_coords
    eps = 1e-12
    inside = (xy[:, 0] > lo_x + eps) & (xy[:, 0] < hi_x - eps) & (xy[:, 1] > lo_y + eps) & (xy[:, 1] < hi_y - eps)
    return np.flatnonzero(inside)


class DenseLOD:
    def __init__(self, pair: MeshPair, alpha_elem, beta_elem=None):
        self.pair = pair
        coarse, fine = pair.coarse, pair.fine
        self.alpha = np.asarray(alpha_elem, dtype=float)
        self.beta = np.zeros((fine.n_elements, 2)) if beta_elem is None else np.asarray(beta_elem)
        self.A = self._operator(np.ones(fine.n_elements))
        self.P = dense_prolongation(pair)
        M = assemble_mass(fine).toarray()
        # full cross mass over coarse free rows and all fine nodes
        self.C = (self.P.T @ M)[coarse.free_nodes]

    def _operator(self, mask):
        fine = self.pair.fine
        A = assemble_stiffness(fine, self.alpha * mask)
        A = A + assemble_gradient_coupling(fine, self.beta * mask[:, None])
        return A.toarray()

    def element_corrector(self, T: int, k: int, node: int) -> np.ndarray:
        """Corrector of coarse hat ``node`` from element T, over all fine nodes."""
        fine = self.pair.fine
        mask = np.zeros(fine.n_elements)
        mask[self.pair.fine_elements_of(T)] = 1.0
        r = self._operator(mask) @ self.P[:, node]
        cols = patch_nodes(self.pair, T, k)
        q = np.zeros(fine.n_nodes)
        if cols.size == 0:
            return q
        N = la.null_space(self.C[:, cols])
        if N.shape[1] == 0:
            return q
        K = self.A[np.ix_(cols, cols)]
        q[cols] = N @ la.solve(N.T @ K @ N, N.T @ r[cols])
        return q

    def corrector_matrix(self, k: int) -> np.ndarray:
        """(fine nodes, coarse free nodes) like ``CorrectorSet.Q``."""
        coarse, fine = self.pair.coarse, self.pair.fine
        Q = np.zeros((fine.n_nodes, coarse.n_free))
        corners = coarse.element_corners
        for T in range(coarse.n_elements):
            for node in corners[T]:
                col = coarse.free_index[node]
                if col >= 0:
                    Q[:, col] += self.element_corrector(T, k, node)
        return Q

    def solve_linear(self, Q: np.ndarray, load: np.ndarray) -> np.ndarray:
        coarse, fine = self.pair.coarse, self.pair.fine
        Phi = (self.P[:, coarse.free_nodes] - Q)[fine.free_nodes]
        A = self.A[np.ix_(fine.free_nodes, fine.free_nodes)]
        c = la.solve(Phi.T @ A @ Phi, Phi.T @ load[fine.free_nodes])
        return (self.P[:, coarse.free_nodes] - Q) @ c
