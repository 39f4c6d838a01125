"""Kačanov fixed-point solvers: the fine reference problem and the multiscale
problem on ``V_{H,k} = (id - Q^k) V_H``.

Every Kačanov step freezes alpha at the current iterate, assembles the fine
stiffness matrix and solves one linear system. On the multiscale space that
system is reduced to the coarse coefficients ``c`` with ``u = Phi c``.
"""
from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy.linalg as la
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .coefficient import CombinedCoefficient, elementwise_alpha
from .corrector import CorrectorSet
from .fem import assemble_load, assemble_stiffness
from .interpolation import TransferOperators, interpolate
from .mesh import StructuredMesh, mesh_for

log = logging.getLogger(__name__)

SOLUTION_MAGIC = b"LODU"
SOLUTION_VERSION = 1

# reduced systems up to this size are solved densely
DENSE_LIMIT = 1024

MODES = ("galerkin", "petrov_galerkin")


class SolverError(RuntimeError):
    pass


@dataclass
class SolveTrace:
    """History of one fixed-point run.

    ``increments[n]`` is the relative increment of step n + 1. ``errors`` holds
    whatever the monitor returned, starting with the initial guess.
    """

    iterations: int = 0
    increments: list[float] = field(default_factory=list)
    errors: list = field(default_factory=list)
    wall_time: float = 0.0
    converged: bool = False

    @property
    def final_increment(self) -> float:
        return self.increments[-1] if self.increments else float("nan")


Monitor = Callable[[int, np.ndarray], object]


class MultiscaleBasis:
    """Columns ``phi_x - Q^k phi_x`` for the coarse free nodes x, stored over
    all fine nodes. Without correctors this is the prolonged coarse basis."""

    def __init__(self, transfer: TransferOperators, correctors: CorrectorSet | None = None):
        pair = transfer.pair
        P = transfer.P.tocsc()[:, pair.coarse.free_nodes]
        if correctors is not None:
            if (correctors.n_coarse, correctors.n_fine) != (pair.coarse.n, pair.fine.n):
                raise ValueError("corrector set does not match the mesh pair")
            Phi = (P - correctors.Q).tocsc()
        else:
            Phi = P
        Phi.eliminate_zeros()
        self.transfer = transfer
        self.correctors = correctors
        self.Phi = Phi
        free = pair.fine.free_nodes
        self.Phi_free = Phi.tocsr()[free].tocsc()
        self.Psi_free = P.tocsr()[free].tocsc()

    @property
    def pair(self):
        return self.transfer.pair

    @property
    def dim(self) -> int:
        return self.Phi.shape[1]

    @property
    def k(self) -> int | None:
        return None if self.correctors is None else self.correctors.k

    def to_fine(self, c: np.ndarray) -> np.ndarray:
        return self.Phi @ c

    def coefficients(self, v_fine: np.ndarray) -> np.ndarray:
        """Coarse free coefficients ``I_H v``; exact for v in the span."""
        return interpolate(self.transfer, v_fine)[self.pair.coarse.free_nodes]


def _solve(A, b: np.ndarray) -> np.ndarray:
    if A.shape[0] == 0:
        return np.zeros(0)
    A = sparse.csc_matrix(A)
    # alpha(p*) may span dozens of orders of magnitude; equilibrate first
    diag = np.abs(A.diagonal())
    if np.any(diag == 0) or not np.all(np.isfinite(diag)):
        raise SolverError("reduced system has a zero or non-finite diagonal")
    d = 1.0 / np.sqrt(diag)
    D = sparse.diags(d)
    As = (D @ A @ D).tocsc()
    try:
        if A.shape[0] <= DENSE_LIMIT:
            y = la.solve(As.toarray(), d * b, check_finite=True)
        else:
            y = spla.splu(As).solve(d * b)
    except (la.LinAlgError, RuntimeError, ValueError) as exc:
        raise SolverError(f"linear solve failed: {exc}") from exc
    x = d * y
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite iterate")
    return x


def _relative_increment(new: np.ndarray, old: np.ndarray) -> float:
    denom = np.linalg.norm(new)
    diff = np.linalg.norm(new - old)
    if denom == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return float(diff / denom)


def _stiffness_free(mesh: StructuredMesh, coeff: CombinedCoefficient, u: np.ndarray):
    free = mesh.free_nodes
    A = assemble_stiffness(mesh, elementwise_alpha(coeff, u))
    return A[free][:, free].tocsc()


def _check_args(tol: float, max_iter: int):
    if not tol > 0:
        raise ValueError("tol must be positive")
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")


def solve_reference(
    mesh: StructuredMesh,
    coeff: CombinedCoefficient,
    f,
    tol: float = 1e-12,
    max_iter: int = 10,
    u0: np.ndarray | None = None,
    monitor: Monitor | None = None,
) -> tuple[np.ndarray, SolveTrace]:
    """Kačanov iteration for the standard FEM problem on ``mesh``."""
    _check_args(tol, max_iter)
    if coeff.n != mesh.n:
        raise ValueError("coefficient and mesh resolution differ")
    start = time.perf_counter()
    free = mesh.free_nodes
    b = assemble_load(mesh, f)[free]
    u = np.zeros(mesh.n_nodes) if u0 is None else np.array(u0, dtype=np.float64)
    u[mesh.boundary_mask] = 0.0
    trace = SolveTrace()
    if monitor is not None:
        trace.errors.append(monitor(0, u))
    for it in range(1, max_iter + 1):
        new = np.zeros(mesh.n_nodes)
        new[free] = _solve(_stiffness_free(mesh, coeff, u), b)
        inc = _relative_increment(new[free], u[free])
        u = new
        trace.iterations = it
        trace.increments.append(inc)
        if monitor is not None:
            trace.errors.append(monitor(it, u))
        if coeff.is_linear or inc <= tol:
            trace.converged = True
            break
    trace.wall_time = time.perf_counter() - start
    return u, trace


def solve_lod(
    basis: MultiscaleBasis,
    coeff: CombinedCoefficient,
    f,
    tol: float = 1e-12,
    max_iter: int = 10,
    u0: np.ndarray | None = None,
    mode: str = "galerkin",
    monitor: Monitor | None = None,
) -> tuple[np.ndarray, SolveTrace]:
    """Kačanov iteration on the multiscale space.

    Galerkin tests with the multiscale basis itself, Petrov-Galerkin with the
    coarse hats. The first step freezes alpha at ``u0``; the increment of the
    first step is measured against ``I_H u0``.
    """
    _check_args(tol, max_iter)
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    fine = basis.pair.fine
    if coeff.n != fine.n:
        raise ValueError("coefficient and basis live on different fine meshes")
    start = time.perf_counter()
    Phi = basis.Phi_free
    test = Phi if mode == "galerkin" else basis.Psi_free
    b = test.T @ assemble_load(fine, f)[fine.free_nodes]

    u = np.zeros(fine.n_nodes) if u0 is None else np.array(u0, dtype=np.float64)
    u[fine.boundary_mask] = 0.0
    c = basis.coefficients(u)
    trace = SolveTrace()
    if monitor is not None:
        trace.errors.append(monitor(0, u))
    for it in range(1, max_iter + 1):
        A = _stiffness_free(fine, coeff, u)
        reduced = (test.T @ (A @ Phi)).tocsc()
        new = _solve(reduced, b)
        inc = _relative_increment(new, c)
        c = new
        u = basis.to_fine(c)
        trace.iterations = it
        trace.increments.append(inc)
        if monitor is not None:
            trace.errors.append(monitor(it, u))
        if coeff.is_linear or inc <= tol:
            trace.converged = True
            break
    trace.wall_time = time.perf_counter() - start
    return u, trace


def reduced_matrix(basis: MultiscaleBasis, coeff: CombinedCoefficient, u: np.ndarray, mode="galerkin"):
    """The reduced system matrix of one Kačanov step frozen at ``u``."""
    A = _stiffness_free(basis.pair.fine, coeff, u)
    test = basis.Phi_free if mode == "galerkin" else basis.Psi_free
    return (test.T @ (A @ basis.Phi_free)).tocsc()


def solve_coarse_fem(
    transfer: TransferOperators,
    coeff: CombinedCoefficient,
    f,
    tol: float = 1e-12,
    max_iter: int = 10,
) -> tuple[np.ndarray, SolveTrace]:
    """Standard coarse FEM solution (prolonged to the fine mesh), with the
    coefficient integrated on the fine mesh."""
    return solve_lod(MultiscaleBasis(transfer, None), coeff, f, tol, max_iter)


# -- solution files -----------------------------------------------------------

_HEADER = struct.Struct("<4sII")


def solution_to_bytes(u: np.ndarray) -> bytes:
    mesh = _mesh_of_length(u.size)
    return _HEADER.pack(SOLUTION_MAGIC, SOLUTION_VERSION, mesh.n) + np.asarray(u, "<f8").tobytes()


def solution_from_bytes(data: bytes) -> np.ndarray:
    if len(data) < _HEADER.size:
        raise ValueError("truncated solution file")
    magic, version, n = _HEADER.unpack_from(data)
    if magic != SOLUTION_MAGIC:
        raise ValueError("not a solution file (bad magic)")
    if version != SOLUTION_VERSION:
        raise ValueError(f"unsupported solution file version {version}")
    u = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if u.size != (n + 1) ** 2:
        raise ValueError(f"solution file holds {u.size} values, expected {(n + 1) ** 2}")
    return u.astype(np.float64)


def save_solution(path, u: np.ndarray) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(solution_to_bytes(u))
    tmp.replace(path)


def load_solution(path) -> np.ndarray:
    return solution_from_bytes(Path(path).read_bytes())


def _mesh_of_length(size: int) -> StructuredMesh:
    n = int(round(np.sqrt(size))) - 1
    if n < 1 or (n + 1) ** 2 != size:
        raise ValueError(f"length {size} is not a nodal vector of a square mesh")
    return mesh_for(n)
