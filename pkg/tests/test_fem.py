import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qlod.fem import (
    EXP1_RHS,
    DEFAULT_RHS,
    REF_COUPLING_X,
    REF_COUPLING_Y,
    assemble_gradient_coupling,
    assemble_load,
    assemble_mass,
    assemble_stiffness,
    element_gradients,
    h1_seminorm,
    interpolate_function,
    l2_norm,
    local_coupling_q1,
    local_mass_q1,
    local_stiffness_q1,
    restrict_free,
)
from qlod.mesh import build_mesh

# corner positions in the documented counter-clockwise order SW, SE, NE, NW
CORNERS = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def _basis(c, x, y):
    cx, cy = CORNERS[c]
    return (x if cx else 1 - x) * (y if cy else 1 - y)


def _grad(c, x, y):
    cx, cy = CORNERS[c]
    gx = (1 if cx else -1) * (y if cy else 1 - y)
    gy = (x if cx else 1 - x) * (1 if cy else -1)
    return gx, gy


def gauss_oracle(h: float, npts: int = 2):
    """Element matrices on [0, h]^2 by tensor Gauss-Legendre quadrature."""
    t, w = np.polynomial.legendre.leggauss(npts)
    t, w = (t + 1) / 2, w / 2
    K, M, BX, BY = (np.zeros((4, 4)) for _ in range(4))
    for xa, wa in zip(t, w):
        for yb, wb in zip(t, w):
            wt = wa * wb * h * h
            for i in range(4):
                gi = np.array(_grad(i, xa, yb)) / h
                for j in range(4):
                    gj = np.array(_grad(j, xa, yb)) / h
                    pj = _basis(j, xa, yb)
                    K[i, j] += wt * gi @ gj
                    M[i, j] += wt * _basis(i, xa, yb) * pj
                    BX[i, j] += wt * pj * gi[0]
                    BY[i, j] += wt * pj * gi[1]
    return K, M, BX, BY


@pytest.mark.parametrize("h", [1.0, 0.25, 2.0**-7])
def test_local_matrices_match_quadrature(h):
    K, M, BX, BY = gauss_oracle(h)
    assert np.allclose(local_stiffness_q1(1.0), K, rtol=1e-12, atol=1e-14)
    assert np.allclose(local_mass_q1(h), M, rtol=1e-12, atol=1e-14 * h * h)
    assert np.allclose(local_coupling_q1((1.0, 0.0), h), BX, rtol=1e-12, atol=1e-14 * h)
    assert np.allclose(local_coupling_q1((0.0, 1.0), h), BY, rtol=1e-12, atol=1e-14 * h)
    # a higher-order rule agrees, so 2x2 Gauss is exact here
    K3, M3, _, _ = gauss_oracle(h, 3)
    assert np.allclose(K, K3, rtol=1e-13) and np.allclose(M, M3, rtol=1e-13)


def test_printed_element_matrices():
    stiff = np.array([[4, -1, -2, -1], [-1, 4, -1, -2], [-2, -1, 4, -1], [-1, -2, -1, 4]]) / 6
    mass = np.array([[4, 2, 1, 2], [2, 4, 2, 1], [1, 2, 4, 2], [2, 1, 2, 4]]) / 36
    assert np.allclose(local_stiffness_q1(1.0), stiff, rtol=1e-15)
    assert np.allclose(local_mass_q1(1.0), mass, rtol=1e-15)
    assert np.array_equal(local_stiffness_q1(0.0), np.zeros((4, 4)))
    assert np.allclose(local_stiffness_q1(3.7).sum(axis=1), 0.0, atol=1e-14)


def test_center_node_value():
    m = build_mesh(2)
    A = restrict_free(m, assemble_stiffness(m, np.ones(4))).toarray()
    assert A.shape == (1, 1)
    assert A[0, 0] == pytest.approx(8 / 3, rel=1e-15)


@pytest.mark.parametrize("n, free", [(1, 0), (2, 1), (4, 9)])
def test_restrict_free_dimensions(n, free):
    m = build_mesh(n)
    A = restrict_free(m, assemble_stiffness(m, np.ones(m.n_elements)))
    assert A.shape == (free, free)
    assert restrict_free(m, np.ones(m.n_nodes)).shape == (free,)


def test_stiffness_properties(rng):
    m = build_mesh(6)
    coeff = rng.uniform(0.1, 10, m.n_elements)
    A = assemble_stiffness(m, coeff)
    assert np.allclose(A @ np.ones(m.n_nodes), 0.0, atol=1e-12)
    assert abs(A - A.T).max() == 0.0
    assert abs(assemble_stiffness(m, 2 * coeff) - 2 * A).max() <= 1e-14
    assert assemble_stiffness(m, np.zeros(m.n_elements)).count_nonzero() == 0
    lam = np.linalg.eigvalsh(restrict_free(m, A).toarray())
    assert lam.min() > 0
    with pytest.raises(ValueError):
        assemble_stiffness(m, coeff[:-1])


def test_mass_properties():
    m = build_mesh(5)
    M = assemble_mass(m)
    assert M.sum() == pytest.approx(1.0, rel=1e-14)
    assert np.linalg.eigvalsh(M.toarray()).min() > 0
    one = build_mesh(1)
    perm = one.element_corners[0]
    assert np.allclose(assemble_mass(one).toarray()[np.ix_(perm, perm)], local_mass_q1(1.0))


def test_coupling_examples(rng):
    m = build_mesh(2)
    assert assemble_gradient_coupling(m, np.zeros((4, 2))).count_nonzero() == 0
    one = build_mesh(1)
    perm = one.element_corners[0]
    B1 = assemble_gradient_coupling(one, np.array([[1.0, 0.0]])).toarray()
    assert np.allclose(B1[np.ix_(perm, perm)], REF_COUPLING_X)
    # (B 1)[i] = sum_K beta_K . int_K grad phi_i, checked with quadrature per element
    beta = rng.standard_normal((4, 2))
    B = assemble_gradient_coupling(m, beta)
    _, _, BX, BY = gauss_oracle(m.h)
    expected = np.zeros(9)
    for e, corners in enumerate(m.element_corners):
        expected[corners] += beta[e, 0] * BX.sum(axis=1) + beta[e, 1] * BY.sum(axis=1)
    assert np.allclose(B @ np.ones(9), expected, rtol=1e-13, atol=1e-15)
    with pytest.raises(ValueError):
        assemble_gradient_coupling(m, beta[:2])


@settings(max_examples=30, deadline=None)
@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(1, 6))
def test_coupling_is_transport_of_gradient(bx, by, n):
    # w^T B v = int v beta . grad w; with v = 1 and w = x or y this is bx or by
    m = build_mesh(n)
    beta = np.tile([bx, by], (m.n_elements, 1))
    B = assemble_gradient_coupling(m, beta)
    xy = m.node_coords
    ones = np.ones(m.n_nodes)
    assert xy[:, 0] @ (B @ ones) == pytest.approx(bx, abs=1e-12)
    assert xy[:, 1] @ (B @ ones) == pytest.approx(by, abs=1e-12)


def test_coupling_symmetry_defect():
    # B + B^T assembles int div(phi_i phi_j beta) = boundary terms only
    m = build_mesh(4)
    beta = np.tile([1.3, -0.4], (m.n_elements, 1))
    B = restrict_free(m, assemble_gradient_coupling(m, beta))
    assert abs(B + B.T).max() < 1e-14
    assert abs(B).max() > 0.01
    assert REF_COUPLING_Y.sum() == pytest.approx(0.0, abs=1e-15)


def test_load_vector():
    m = build_mesh(10)
    assert assemble_load(m, 1.0).sum() == pytest.approx(1.0, rel=1e-14)
    assert not assemble_load(m, 0.0).any()
    # x2 = 0.1 is a mesh line for n = 10, so the midpoint rule is exact
    assert assemble_load(m, DEFAULT_RHS).sum() == pytest.approx(0.91, rel=1e-14)
    fine = build_mesh(128)
    assert abs(assemble_load(fine, DEFAULT_RHS).sum() - 0.91) <= fine.h * 0.9
    assert assemble_load(build_mesh(8), EXP1_RHS).sum() == pytest.approx(100 * 0.25 + 2 * 0.75, rel=1e-14)


def test_norms():
    m = build_mesh(64)
    assert h1_seminorm(np.zeros(m.n_nodes)) == 0.0
    x = interpolate_function(m, lambda x, y: x)
    assert h1_seminorm(x) == pytest.approx(1.0, rel=1e-13)
    bubble = interpolate_function(m, lambda x, y: x * (1 - x) * y * (1 - y))
    assert abs(l2_norm(bubble) - 1 / 30) <= 1e-3
    with pytest.raises(ValueError):
        h1_seminorm(np.ones(10))


def test_element_gradients_of_bilinear():
    m = build_mesh(3)
    v = interpolate_function(m, lambda x, y: 2 * x - 3 * y + x * y)
    g = element_gradients(m, v)
    mid = m.element_midpoints
    assert np.allclose(g[:, 0], 2 + mid[:, 1])
    assert np.allclose(g[:, 1], -3 + mid[:, 0])
