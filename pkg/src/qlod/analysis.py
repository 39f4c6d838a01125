"""Relative error measures and computable a-posteriori quantities.

``eta_bound`` returns upper surrogates for the linearization error, not the
error itself: the latter is a dual norm over all test functions.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .coefficient import CombinedCoefficient, element_midpoint_values
from .fem import element_gradients, h1_seminorm, l2_norm, mesh_of
from .interpolation import TransferOperators, interpolate


@dataclass(frozen=True)
class ErrorReport:
    e_lod: float
    e_h: float
    ref_h1: float
    ref_l2: float
    diff_h1: float
    diff_l2: float
    fingerprint: str = ""


def _fingerprint(*vectors: np.ndarray) -> str:
    h = hashlib.sha256()
    for v in vectors:
        h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return h.hexdigest()[:16]


def relative_errors(u_ref: np.ndarray, u_lod: np.ndarray, tr: TransferOperators) -> ErrorReport:
    """``e_lod = |u_ref - u_lod|_1 / |u_ref|_1`` and
    ``e_h = ||u_ref - I_H u_lod||_0 / ||u_ref||_0``."""
    u_ref = np.asarray(u_ref, dtype=np.float64)
    u_lod = np.asarray(u_lod, dtype=np.float64)
    if u_ref.shape != u_lod.shape or u_ref.size != tr.pair.fine.n_nodes:
        raise ValueError("u_ref and u_lod must be nodal vectors on the fine mesh of the transfer")
    ref_h1, ref_l2 = h1_seminorm(u_ref), l2_norm(u_ref)
    if ref_h1 == 0.0 or ref_l2 == 0.0:
        raise ValueError("reference solution has zero norm")
    diff_h1 = h1_seminorm(u_ref - u_lod)
    diff_l2 = l2_norm(u_ref - tr.prolong(interpolate(tr, u_lod)))
    return ErrorReport(
        diff_h1 / ref_h1, diff_l2 / ref_l2, ref_h1, ref_l2, diff_h1, diff_l2, _fingerprint(u_ref, u_lod)
    )


def best_approximation_error(u_ref: np.ndarray, tr: TransferOperators) -> float:
    """Relative L2 distance of ``u_ref`` to the prolonged coarse space."""
    return l2_norm(u_ref - tr.prolong(interpolate(tr, u_ref))) / l2_norm(u_ref)


def _element_l2(field: np.ndarray, h: float) -> float:
    # midpoint rule for an elementwise vector field
    return float(np.sqrt(np.sum(field**2) * h * h))


def diagnostic_G(
    u_ref: np.ndarray,
    u_lod: np.ndarray,
    p_star: np.ndarray,
    v_Hk: np.ndarray,
    coeff: CombinedCoefficient,
) -> float:
    """``||(alpha(p*) - alpha(u)) grad v_Hk + (alpha(u_lod) - alpha(p*)) grad u_lod||_0``
    with all factors frozen at fine element midpoints."""
    mesh = mesh_of(u_ref)
    corners = mesh.element_corners

    def alpha(v):
        return coeff.alpha(element_midpoint_values(corners, v))

    a_p = alpha(p_star)
    field = (a_p - alpha(u_ref))[:, None] * element_gradients(mesh, v_Hk)
    field += (alpha(u_lod) - a_p)[:, None] * element_gradients(mesh, u_lod)
    return _element_l2(field, mesh.h)


def eta_bound(
    kind: str,
    u_ref: np.ndarray,
    p_star: np.ndarray,
    coeff: CombinedCoefficient,
    n_samples: int = 11,
) -> float:
    """Upper surrogate of the linearization error.

    Kačanov: ``max|p* - u| * |u|_1`` (nodal max is exact for Q1).
    Fréchet: ``max |alpha_ss(q) grad q| * ||u - p*||_0^2 / 2`` with q sampled
    on the segment between p* and u at element midpoints.
    """
    u_ref = np.asarray(u_ref, dtype=np.float64)
    p_star = np.asarray(p_star, dtype=np.float64)
    diff = u_ref - p_star
    if kind == "kacanov":
        return float(np.max(np.abs(diff)) * h1_seminorm(u_ref))
    if kind != "frechet":
        raise ValueError(f"unknown linearization {kind!r}")
    if not np.any(diff):
        return 0.0
    mesh = mesh_of(u_ref)
    corners = mesh.element_corners
    sup = 0.0
    for theta in np.linspace(0.0, 1.0, n_samples):
        q = p_star + theta * diff
        grad = np.hypot(*element_gradients(mesh, q).T)
        sup = max(sup, float(np.max(np.abs(coeff.alpha_ss(element_midpoint_values(corners, q))) * grad)))
    return sup * l2_norm(diff) ** 2 / 2.0
