"""Linearized element correctors on k-layer patches.

For a coarse element T and one of its corner hats phi, the corrector
``q = Q_{T,k} phi`` is the fine function supported in the patch N^k(T) with
``C q = 0`` (q lies in the kernel of the L2 projection) and

    a_L(q, w) = a_L|_T(phi, w)   for all such w,

where ``a_L(v, w) = (alpha(p*) grad v + v beta, grad w)``. The kernel
constraint is imposed with Lagrange multipliers and each patch saddle-point
matrix is factorized once for all right-hand sides that share it.
"""
from __future__ import annotations

import hashlib
import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

from .coefficient import CombinedCoefficient, element_midpoint_values
from .fem import (
    REF_COUPLING_X,
    REF_COUPLING_Y,
    REF_STIFFNESS,
    assemble_gradient_coupling,
    assemble_stiffness,
    element_gradients,
    h1_seminorm,
)
from .interpolation import TransferOperators, build_transfer, kernel_constraint_rows
from .mesh import CORNER_OFFSETS, MeshPair, Patch, build_patch, mesh_for, patch_box

log = logging.getLogger(__name__)

CACHE_MAGIC = b"LODC"
CACHE_VERSION = 1
KIND_IDS = {"kacanov": 0, "frechet": 1}


class EllipticityError(ValueError):
    """The frozen coefficient alpha(x, p*) is not positive everywhere."""


class CorrectorSolveError(RuntimeError):
    def __init__(self, message: str, patch_center: int):
        super().__init__(f"{message} (patch centered at coarse element {patch_center})")
        self.patch_center = patch_center


@dataclass(frozen=True)
class LinearizationData:
    kind: str
    p_star: np.ndarray = field(repr=False)
    alpha_elem: np.ndarray = field(repr=False)
    beta_elem: np.ndarray = field(repr=False)
    fingerprint: bytes = field(repr=False, default=b"")

    @property
    def beta_sup(self) -> float:
        if not self.beta_elem.size:
            return 0.0
        return float(np.max(np.hypot(self.beta_elem[:, 0], self.beta_elem[:, 1])))

    @property
    def n(self) -> int:
        return int(round(np.sqrt(self.alpha_elem.size)))


def linearization_fingerprint(coeff: CombinedCoefficient, p_star: np.ndarray) -> bytes:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(p_star, dtype="<f8").tobytes())
    h.update(coeff.fingerprint())
    h.update(coeff.descriptor.encode())
    return h.digest()


def build_linearization(coeff: CombinedCoefficient, kind: str, p_star: np.ndarray) -> LinearizationData:
    """Freeze alpha (and for ``frechet`` also beta = alpha_s(p*) grad p*) per fine element.

    The affine part ``-p* beta`` of the Frechet form does not enter the
    corrector problems and is dropped.
    """
    if kind not in KIND_IDS:
        raise ValueError(f"unknown linearization {kind!r}; expected one of {sorted(KIND_IDS)}")
    mesh = mesh_for(coeff.n)
    p_star = np.asarray(p_star, dtype=np.float64)
    if p_star.shape != (mesh.n_nodes,):
        raise ValueError(f"p* must be a nodal vector on the {mesh.n}x{mesh.n} fine mesh")
    mid = element_midpoint_values(mesh.element_corners, p_star)
    alpha = coeff.alpha(mid)
    if not np.all(np.isfinite(alpha)) or np.any(alpha <= 0):
        raise EllipticityError(f"alpha(x, p*) has minimum {np.nanmin(alpha):.3g}; must be positive")
    if kind == "frechet":
        beta = coeff.alpha_s(mid)[:, None] * element_gradients(mesh, p_star)
    else:
        beta = np.zeros((mesh.n_elements, 2))
    return LinearizationData(kind, p_star, alpha, beta, linearization_fingerprint(coeff, p_star))


def frechet_coercivity_precheck(lin: LinearizationData, H: float) -> float:
    """``H * sup |beta|``, a computable stand-in for the coercivity condition.

    The true condition also involves the (unknown) interpolation constant, so
    this only warns; values of order one or more signal a possibly ill-posed
    corrector problem.
    """
    value = H * lin.beta_sup
    if value >= 1.0:
        warnings.warn(
            f"Frechet corrector problems may be ill-posed: H*sup|beta| = {value:.3g} >= 1",
            RuntimeWarning,
            stacklevel=2,
        )
    return value


def _element_matrices(lin: LinearizationData, elements: np.ndarray, h: float) -> np.ndarray:
    alpha = lin.alpha_elem[elements]
    beta = lin.beta_elem[elements]
    return (
        alpha[:, None, None] * REF_STIFFNESS
        + h * (beta[:, 0, None, None] * REF_COUPLING_X + beta[:, 1, None, None] * REF_COUPLING_Y)
    )


def _coarse_hat_values(ratio: int) -> np.ndarray:
    """(ratio^2, 4 fine corners, 4 coarse corners) values of the coarse hats of
    one coarse element at the corners of its fine elements."""
    a, b = np.meshgrid(np.arange(ratio), np.arange(ratio), indexing="xy")
    a, b = a.ravel(), b.ravel()
    out = np.empty((a.size, 4, 4))
    for fc, (dx, dy) in enumerate(CORNER_OFFSETS):
        x = (a + dx) / ratio
        y = (b + dy) / ratio
        for cc, (cx, cy) in enumerate(CORNER_OFFSETS):
            out[:, fc, cc] = (x if cx else 1.0 - x) * (y if cy else 1.0 - y)
    return out


class CorrectorProblem:
    """Shared, read-only data for all patch problems of one linearization."""

    def __init__(self, pair: MeshPair, lin: LinearizationData, transfer: TransferOperators | None = None):
        if lin.n != pair.fine.n:
            raise ValueError("linearization and mesh pair live on different fine meshes")
        self.pair = pair
        self.lin = lin
        self.transfer = transfer if transfer is not None else build_transfer(pair)
        fine = pair.fine
        op = assemble_stiffness(fine, lin.alpha_elem)
        if lin.kind == "frechet":
            op = op + assemble_gradient_coupling(fine, lin.beta_elem)
        free = fine.free_nodes
        self.operator = op.tocsr()[free][:, free].tocsr()
        self._hats = _coarse_hat_values(pair.ratio)

    def element_rhs(self, T: int) -> np.ndarray:
        """(n_fine_free, 4) columns ``a_L|_T(phi_c, phi_i)`` for the 4 corner hats of T."""
        fine = self.pair.fine
        elems = self.pair.fine_elements_of(T)
        local = _element_matrices(self.lin, elems, fine.h)
        contrib = np.einsum("eij,ejc->eic", local, self._hats)
        out = np.zeros((fine.n_nodes, 4))
        corners = fine.element_corners[elems]
        for c in range(4):
            np.add.at(out[:, c], corners, contrib[:, :, c])
        return out[fine.free_nodes]

    def coarse_corner_nodes(self, T: int) -> np.ndarray:
        coarse = self.pair.coarse
        i, j = T % coarse.n, T // coarse.n
        return coarse.node_index(i + CORNER_OFFSETS[:, 0], j + CORNER_OFFSETS[:, 1])

    def saddle_matrix(self, patch: Patch):
        """Patch operator, constraints and the assembled saddle-point matrix."""
        cons = kernel_constraint_rows(self.transfer, patch)
        cols = cons.fine_cols
        K = self.operator[cols][:, cols]
        m, p = K.shape[0], cons.matrix.shape[0]
        S = sparse.bmat([[K, cons.matrix.T], [cons.matrix, None]], format="csc") if p else K.tocsc()
        return K, cons, S, m, p

    def solve_patch(self, patch: Patch, rhs: np.ndarray) -> np.ndarray:
        """Solve the saddle system on ``patch`` for rhs columns on fine free nodes.

        Returns the correctors on the patch interior (rows follow
        ``kernel_constraint_rows(...).fine_cols``).
        """
        cons = kernel_constraint_rows(self.transfer, patch)
        cols = cons.fine_cols
        if cols.size == 0:
            return cols, np.zeros((0, rhs.shape[1]))
        K = self.operator[cols][:, cols]
        Cp = cons.matrix
        # symmetric diagonal scaling keeps high-contrast patches well conditioned
        d = 1.0 / np.sqrt(np.abs(K.diagonal()))
        Dm = sparse.diags(d)
        Ks = (Dm @ K @ Dm).tocsc()
        b = d[:, None] * rhs[cols]
        try:
            solve = _factorize(Ks)
            y = solve(b)
            if Cp.shape[0]:
                # eliminate the multipliers through the small dense Schur complement
                Cs = (Cp @ Dm).toarray()
                Cs /= np.abs(Cs).max(axis=1, keepdims=True)
                Z = solve(np.ascontiguousarray(Cs.T))
                S, r = Cs @ Z, Cs @ y
                if Cs.shape[0] < Cs.shape[1]:
                    mu = np.linalg.solve(S, r)
                else:
                    # more constraints than unknowns (H = h): S is singular but consistent
                    mu = np.linalg.lstsq(S, r, rcond=None)[0]
                y = y - Z @ mu
        except (RuntimeError, np.linalg.LinAlgError) as exc:
            raise CorrectorSolveError(f"singular corrector system: {exc}", patch.center) from exc
        if not np.all(np.isfinite(y)):
            raise CorrectorSolveError("non-finite corrector", patch.center)
        return cols, d[:, None] * y


def _factorize(A: sparse.csc_matrix):
    """Sparse LU without pivoting (fill-reducing symmetric ordering); falls back
    to partial pivoting if that breaks down."""
    try:
        lu = spla.splu(
            A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0, options={"SymmetricMode": True}
        )
        if np.all(np.isfinite(lu.U.diagonal())) and np.all(lu.U.diagonal() != 0):
            return lu.solve
    except RuntimeError:
        pass
    return spla.splu(A).solve


def solve_element_corrector(
    pair: MeshPair,
    patch: Patch,
    lin: LinearizationData,
    local_basis_index: int,
    transfer: TransferOperators | None = None,
    problem: CorrectorProblem | None = None,
) -> np.ndarray:
    """``Q_{T,k}`` applied to corner hat ``local_basis_index`` of the patch
    center, zero-extended to a fine nodal vector."""
    if problem is None:
        problem = CorrectorProblem(pair, lin, transfer)
    rhs = problem.element_rhs(patch.center)[:, [local_basis_index]]
    cols, q = problem.solve_patch(patch, rhs)
    out = np.zeros(pair.fine.n_free)
    out[cols] = q[:, 0]
    full = np.zeros(pair.fine.n_nodes)
    full[pair.fine.free_nodes] = out
    return full


@dataclass
class CorrectorSet:
    """Columns of ``Q`` are ``Q^k phi_x`` for the coarse free nodes x, as fine
    nodal vectors over all nodes."""

    n_coarse: int
    n_fine: int
    k: int
    kind: str
    fingerprint: bytes
    Q: sparse.csc_matrix = field(repr=False)

    def vector(self, node: int) -> np.ndarray:
        """Corrector of the coarse free node with position ``node``."""
        return self.Q[:, node].toarray().ravel()

    def apply(self, v_coarse: np.ndarray) -> np.ndarray:
        """``Q^k v_H`` for a coarse nodal vector over all nodes."""
        coarse = mesh_for(self.n_coarse)
        return self.Q @ v_coarse[coarse.free_nodes]


def assemble_corrector_set(
    pair: MeshPair,
    k: int,
    lin: LinearizationData,
    transfer: TransferOperators | None = None,
    problem: CorrectorProblem | None = None,
) -> CorrectorSet:
    """Sum element correctors into one corrector per coarse free node.

    Elements sharing an identical (clipped) patch share one factorization.
    Contributions are added in element order, so the result does not depend
    on how patches were grouped.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if problem is None:
        problem = CorrectorProblem(pair, lin, transfer)
    coarse, fine = pair.coarse, pair.fine

    groups: dict[tuple, list[int]] = {}
    for T in range(coarse.n_elements):
        groups.setdefault(patch_box(coarse.n, T, k), []).append(T)

    results: dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}
    for Ts in groups.values():
        patch = build_patch(pair, Ts[0], k)
        rhs_cols, owners = [], []
        for T in Ts:
            nodes = coarse.free_index[problem.coarse_corner_nodes(T)]
            keep = nodes >= 0
            if not keep.any():
                continue
            rhs_cols.append(problem.element_rhs(T)[:, keep])
            owners.append((T, nodes[keep]))
        if not rhs_cols:
            continue
        try:
            cols, q = problem.solve_patch(patch, np.hstack(rhs_cols))
        except CorrectorSolveError as exc:
            raise CorrectorSolveError(str(exc).split(" (patch")[0], Ts[0]) from exc
        start = 0
        for T, nodes in owners:
            results[T] = (cols, nodes, q[:, start : start + nodes.size])
            start += nodes.size

    rows, colidx, vals = [], [], []
    fine_free = fine.free_nodes
    for T in sorted(results):
        cols, nodes, q = results[T]
        for c, node in enumerate(nodes):
            rows.append(fine_free[cols])
            colidx.append(np.full(cols.size, node))
            vals.append(q[:, c])
    shape = (fine.n_nodes, coarse.n_free)
    if rows:
        Q = sparse.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(colidx))), shape=shape
        ).tocsc()
    else:
        Q = sparse.csc_matrix(shape)
    Q.sum_duplicates()
    Q.eliminate_zeros()
    return CorrectorSet(coarse.n, fine.n, k, lin.kind, lin.fingerprint, Q)


def full_domain_k(pair: MeshPair) -> int:
    """Smallest k whose patches cover the whole domain for every element."""
    return max(pair.coarse.n - 1, 0)


def decay_profile(
    pair: MeshPair,
    lin: LinearizationData,
    v_H: np.ndarray,
    k_max: int,
    transfer: TransferOperators | None = None,
) -> list[float]:
    """``|Q v_H - Q^k v_H|_1`` for k = 1..k_max, with the full-domain corrector as Q."""
    if k_max > full_domain_k(pair):
        raise ValueError(f"k_max={k_max} exceeds coarse n - 1 = {full_domain_k(pair)}")
    problem = CorrectorProblem(pair, lin, transfer)
    reference = assemble_corrector_set(pair, full_domain_k(pair), lin, problem=problem).apply(v_H)
    out = []
    for k in range(1, k_max + 1):
        qk = assemble_corrector_set(pair, k, lin, problem=problem).apply(v_H)
        out.append(h1_seminorm(reference - qk))
    return out


def fit_decay_rate(d: list[float]) -> tuple[float, float]:
    """Least-squares fit ``log d_k = a + k log nu``; returns ``(nu, R^2)``."""
    d = np.asarray(d, dtype=np.float64)
    k = np.arange(1, d.size + 1)
    y = np.log(d)
    slope, intercept = np.polyfit(k, y, 1)
    resid = y - (intercept + slope * k)
    ss_tot = np.sum((y - y.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    return float(np.exp(slope)), float(r2)


# -- cache files ------------------------------------------------------------

_HEADER = struct.Struct("<4sIIIIB32s")


def write_corrector_cache(path, cs: CorrectorSet) -> None:
    """Write atomically: a temporary file is renamed over ``path``."""
    fine = mesh_for(cs.n_fine)
    path = Path(path)
    header = _HEADER.pack(
        CACHE_MAGIC, CACHE_VERSION, cs.n_coarse, cs.n_fine, cs.k, KIND_IDS[cs.kind], cs.fingerprint
    )
    dense = cs.Q.tocsr()[fine.free_nodes].toarray().T
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(dense, dtype="<f8").tobytes())
    tmp.replace(path)


def read_corrector_cache(
    path, n_coarse: int, n_fine: int, k: int, kind: str, fingerprint: bytes
) -> CorrectorSet | None:
    """Load a cache file; ``None`` on any mismatch or corruption."""
    path = Path(path)
    if not path.exists():
        return None
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        warnings.warn(f"corrupt corrector cache {path}: truncated header", RuntimeWarning, stacklevel=2)
        return None
    magic, version, nc, nf, kk, kind_id, fp = _HEADER.unpack_from(data)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        warnings.warn(f"corrupt corrector cache {path}: bad magic or version", RuntimeWarning, stacklevel=2)
        return None
    if (nc, nf, kk, kind_id, fp) != (n_coarse, n_fine, k, KIND_IDS[kind], fingerprint):
        return None
    coarse, fine = mesh_for(n_coarse), mesh_for(n_fine)
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != coarse.n_free * fine.n_free:
        warnings.warn(f"corrupt corrector cache {path}: wrong payload size", RuntimeWarning, stacklevel=2)
        return None
    dense = body.reshape(coarse.n_free, fine.n_free).T
    full = np.zeros((fine.n_nodes, coarse.n_free))
    full[fine.free_nodes] = dense
    Q = sparse.csc_matrix(full)
    return CorrectorSet(n_coarse, n_fine, k, kind, fingerprint, Q)
