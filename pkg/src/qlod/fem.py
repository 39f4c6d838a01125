"""Q1 finite element assembly on structured meshes.

Element matrices are exact and built from 1D tensor products. Global
operators are returned as ``scipy.sparse.csr_matrix`` over *all* nodes;
``restrict_free`` drops the Dirichlet boundary rows and columns. Nodal vectors
are plain float arrays over all nodes with zero boundary entries.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sparse

from .mesh import CORNER_OFFSETS, StructuredMesh, mesh_for

# 1D reference element on [0, 1] with N0 = 1 - t, N1 = t
_M1 = np.array([[1.0, 0.5], [0.5, 1.0]]) / 3.0  # int N_a N_b
_K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])  # int N_a' N_b'
_D1 = np.array([[-1.0, -1.0], [1.0, 1.0]]) / 2.0  # [a, b] = int N_a' N_b

# tensor index (a + 2 b) of each counter-clockwise corner
_TENSOR = CORNER_OFFSETS[:, 0] + 2 * CORNER_OFFSETS[:, 1]


def _tensor(mx: np.ndarray, my: np.ndarray) -> np.ndarray:
    # x is the fast index, so the tensor basis is kron(my, mx)
    full = np.kron(my, mx)
    return full[np.ix_(_TENSOR, _TENSOR)]


REF_STIFFNESS = _tensor(_K1, _M1) + _tensor(_M1, _K1)
REF_MASS = _tensor(_M1, _M1)
# REF_COUPLING_X[i, j] = int phi_j d/dx phi_i on the unit square, likewise for y
REF_COUPLING_X = _tensor(_D1, _M1)
REF_COUPLING_Y = _tensor(_M1, _D1)


def local_stiffness_q1(coefficient: float) -> np.ndarray:
    """Element stiffness; in 2D it does not depend on the element size."""
    return coefficient * REF_STIFFNESS


def local_mass_q1(h: float) -> np.ndarray:
    return h * h * REF_MASS


def local_coupling_q1(beta, h: float) -> np.ndarray:
    """``B[i, j] = int_K phi_j (beta . grad phi_i)`` for constant ``beta``."""
    return h * (beta[0] * REF_COUPLING_X + beta[1] * REF_COUPLING_Y)


def _assemble(mesh: StructuredMesh, local: np.ndarray) -> sparse.csr_matrix:
    """Scatter (n_elements, 4, 4) local matrices, element-major order."""
    corners = mesh.element_corners
    rows = np.repeat(corners, 4, axis=1).ravel()
    cols = np.tile(corners, (1, 4)).ravel()
    shape = (mesh.n_nodes, mesh.n_nodes)
    return sparse.coo_matrix((local.ravel(), (rows, cols)), shape=shape).tocsr()


def _check_length(mesh: StructuredMesh, values: np.ndarray, what: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != mesh.n_elements:
        raise ValueError(f"{what} has {values.shape[0]} entries, mesh has {mesh.n_elements} elements")
    return values


def assemble_stiffness(mesh: StructuredMesh, elem_coeff) -> sparse.csr_matrix:
    elem_coeff = _check_length(mesh, elem_coeff, "element coefficient")
    return _assemble(mesh, elem_coeff[:, None, None] * REF_STIFFNESS)


def assemble_mass(mesh: StructuredMesh) -> sparse.csr_matrix:
    local = np.broadcast_to(local_mass_q1(mesh.h), (mesh.n_elements, 4, 4))
    return _assemble(mesh, local)


def assemble_gradient_coupling(mesh: StructuredMesh, beta) -> sparse.csr_matrix:
    beta = _check_length(mesh, beta, "beta")
    local = mesh.h * (
        beta[:, 0, None, None] * REF_COUPLING_X + beta[:, 1, None, None] * REF_COUPLING_Y
    )
    return _assemble(mesh, local)


@dataclass(frozen=True)
class PiecewiseConstant:
    """``default`` everywhere except on closed boxes ``(x0, x1, y0, y1)``.

    Later regions take precedence over earlier ones.
    """

    default: float
    regions: tuple[tuple[tuple[float, float, float, float], float], ...] = ()

    def __call__(self, x, y):
        out = np.full(np.broadcast(x, y).shape, float(self.default))
        for (x0, x1, y0, y1), value in self.regions:
            out[(x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)] = value
        return out


# rhs used throughout the experiments: 0.1 for x2 <= 0.1, else 1
DEFAULT_RHS = PiecewiseConstant(1.0, (((-np.inf, np.inf, -np.inf, 0.1), 0.1),))
# rhs for the iteration study: 100 for x2 <= 0.25, else 2
EXP1_RHS = PiecewiseConstant(2.0, (((-np.inf, np.inf, -np.inf, 0.25), 100.0),))
RHS = {"default": DEFAULT_RHS, "exp1": EXP1_RHS}


def element_values(mesh: StructuredMesh, f) -> np.ndarray:
    """Midpoint samples of ``f``; a constant or array passes through."""
    if callable(f):
        mid = mesh.element_midpoints
        return np.asarray(f(mid[:, 0], mid[:, 1]), dtype=np.float64)
    return np.broadcast_to(np.asarray(f, dtype=np.float64), (mesh.n_elements,))


def assemble_load(mesh: StructuredMesh, f) -> np.ndarray:
    """``b_i = int f phi_i`` with f frozen at element midpoints."""
    fk = element_values(mesh, f)
    b = np.zeros(mesh.n_nodes)
    # each bilinear hat integrates to h^2 / 4 over an element
    np.add.at(b, mesh.element_corners, np.repeat(fk[:, None] * mesh.h**2 / 4.0, 4, axis=1))
    return b


def restrict_free(mesh: StructuredMesh, op):
    free = mesh.free_nodes
    if sparse.issparse(op):
        return op.tocsr()[free][:, free]
    return np.asarray(op)[free]


def extend_free(mesh: StructuredMesh, v_free: np.ndarray) -> np.ndarray:
    v = np.zeros(mesh.n_nodes)
    v[mesh.free_nodes] = v_free
    return v


def element_gradients(mesh: StructuredMesh, v: np.ndarray) -> np.ndarray:
    """(n_elements, 2) gradient of the bilinear interpolant at each midpoint."""
    c = v[mesh.element_corners]
    gx = (c[:, 1] - c[:, 0] + c[:, 2] - c[:, 3]) / (2.0 * mesh.h)
    gy = (c[:, 3] - c[:, 0] + c[:, 2] - c[:, 1]) / (2.0 * mesh.h)
    return np.column_stack([gx, gy])


class Norms:
    """Unit-coefficient stiffness and mass of a mesh, for H1/L2 evaluation."""

    def __init__(self, mesh: StructuredMesh):
        self.mesh = mesh
        self.stiffness = assemble_stiffness(mesh, np.ones(mesh.n_elements))
        self.mass = assemble_mass(mesh)

    def h1_seminorm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.stiffness @ v), 0.0)))

    def l2_norm(self, v: np.ndarray) -> float:
        return float(np.sqrt(max(v @ (self.mass @ v), 0.0)))


_NORMS: dict[int, Norms] = {}


def norms_for(mesh: StructuredMesh) -> Norms:
    if mesh.n not in _NORMS:
        _NORMS[mesh.n] = Norms(mesh)
    return _NORMS[mesh.n]


def mesh_of(v: np.ndarray) -> StructuredMesh:
    """Mesh whose full nodal vectors have the length of ``v``."""
    n = int(round(np.sqrt(len(v)))) - 1
    if n < 1 or (n + 1) ** 2 != len(v):
        raise ValueError(f"length {len(v)} is not a nodal vector of a square mesh")
    return mesh_for(n)


def h1_seminorm(v: np.ndarray) -> float:
    return norms_for(mesh_of(v)).h1_seminorm(v)


def l2_norm(v: np.ndarray) -> float:
    return norms_for(mesh_of(v)).l2_norm(v)


def interpolate_function(mesh: StructuredMesh, func) -> np.ndarray:
    """Nodal interpolant of ``func(x, y)``."""
    xy = mesh.node_coords
    return np.asarray(func(xy[:, 0], xy[:, 1]), dtype=np.float64)
