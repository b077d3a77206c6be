import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wgeig.mesh import build_l_shape, build_unit_square
from wgeig.polyspace import (MAX_QUADRATURE_DEGREE, WeakFunction, WgSpace, dim_pk,
                             edge_basis_values, l2_error_Q0, monomial_exponents,
                             physical_points, project_Q0, project_Qb, project_Qbold,
                             project_Qh, project_Qh_many, quadrature_edge, quadrature_triangle)


def exact_monomial_integral(a, b):
    # int over the reference triangle of x^a y^b = a! b! / (a + b + 2)!
    return math.factorial(a) * math.factorial(b) / math.factorial(a + b + 2)


def integrate(rule, a, b):
    x, y = rule.points.T
    return float(np.sum(rule.weights * x ** a * y ** b))


def test_centroid_rule():
    r = quadrature_triangle(1)
    assert integrate(r, 1, 0) == pytest.approx(1 / 6, rel=1e-15)


def test_x2y2():
    assert integrate(quadrature_triangle(4), 2, 2) == pytest.approx(1 / 180, rel=1e-13)


@pytest.mark.parametrize("degree", [0, 1, 2, 5, 8, 13, 20, 30])
def test_triangle_exactness(degree):
    r = quadrature_triangle(degree)
    assert r.weights.sum() == pytest.approx(0.5, rel=1e-14)
    for a, b in monomial_exponents(degree):
        assert integrate(r, a, b) == pytest.approx(exact_monomial_integral(a, b), rel=1e-13)
    x, y = r.points.T
    assert np.all((x >= 0) & (y >= 0) & (x + y <= 1))


@pytest.mark.parametrize("degree", [0, 3, 10, 25])
def test_edge_exactness(degree):
    r = quadrature_edge(degree)
    for p in range(degree + 1):
        assert float(np.sum(r.weights * r.points ** p)) == pytest.approx(1 / (p + 1), rel=1e-13)


def test_unsupported_degree():
    with pytest.raises(ValueError):
        quadrature_triangle(MAX_QUADRATURE_DEGREE + 1)
    with pytest.raises(ValueError):
        quadrature_edge(-1)


def test_dimensions():
    assert [dim_pk(k) for k in range(4)] == [1, 3, 6, 10]


@pytest.mark.parametrize("k", [1, 2, 3])
def test_element_basis_orthonormal(k):
    mesh = build_unit_square(3, "crisscross")
    space = WgSpace(mesh, k)
    rule = quadrature_triangle(2 * k)
    pts, wts = physical_points(mesh, rule)
    phi = space.basis.values(pts)
    mass = np.einsum("tq,tqi,tqj->tij", wts, phi, phi)
    np.testing.assert_allclose(mass, np.broadcast_to(np.eye(dim_pk(k)), mass.shape), atol=1e-12)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_basis_reproduces_monomials(k, rng):
    mesh = build_l_shape(2)
    space = WgSpace(mesh, k)
    tris = np.arange(mesh.n_triangles)
    # random points inside each triangle
    bary = rng.dirichlet(np.ones(3), size=(mesh.n_triangles, 5))
    pts = np.einsum("tqi,tid->tqd", bary, mesh.vertices[mesh.triangles])
    for a, b in monomial_exponents(k):
        coeffs = project_Q0(lambda x, y: x ** a * y ** b, space)
        vals = np.einsum("tqi,ti->tq", space.basis.values(pts, tris), coeffs)
        np.testing.assert_allclose(vals, pts[..., 0] ** a * pts[..., 1] ** b, atol=1e-12)


def test_basis_gradients_match_finite_differences():
    mesh = build_unit_square(2)
    space = WgSpace(mesh, 3)
    pts = mesh.centroids[:, None, :] + np.array([[0.01, -0.02]])
    gx, gy = space.basis.gradients(pts)
    d = 1e-6
    fx = (space.basis.values(pts + [d, 0]) - space.basis.values(pts - [d, 0])) / (2 * d)
    fy = (space.basis.values(pts + [0, d]) - space.basis.values(pts - [0, d])) / (2 * d)
    np.testing.assert_allclose(gx, fx, atol=1e-6)
    np.testing.assert_allclose(gy, fy, atol=1e-6)


def test_edge_basis_orthonormal():
    r = quadrature_edge(10)
    lengths = np.array([0.5, 2.0])
    psi = edge_basis_values(3, np.broadcast_to(r.points, (2, len(r.points))), lengths)
    gram = np.einsum("eq,eqi,eqj->eij", lengths[:, None] * r.weights, psi, psi)
    np.testing.assert_allclose(gram, np.broadcast_to(np.eye(4), gram.shape), atol=1e-13)


@pytest.mark.parametrize("k", [1, 2, 3])
@pytest.mark.parametrize("builder", [build_unit_square, build_l_shape])
def test_space_counts_and_numbering(k, builder):
    mesh = builder(3, "right_down")
    space = WgSpace(mesh, k)
    assert space.n0 == mesh.n_triangles * dim_pk(k)
    assert space.nb == int((~mesh.boundary).sum()) * k
    l2g = space.local_to_global
    used = np.unique(l2g[l2g >= 0])
    np.testing.assert_array_equal(used, np.arange(space.ndof))
    # boundary edges carry no DOFs
    bnd_local = mesh.boundary[mesh.tri_edges]
    traces = l2g[:, space.nloc0:].reshape(mesh.n_triangles, 3, k)
    assert np.all(traces[bnd_local] == -1)
    assert np.all(traces[~bnd_local] >= space.n0)


def test_space_rejects_bad_degree():
    with pytest.raises(ValueError):
        WgSpace(build_unit_square(1), 0)


def test_weak_function_shape():
    space = WgSpace(build_unit_square(2), 1)
    with pytest.raises(ValueError):
        WeakFunction(space, np.zeros(space.ndof + 1))
    v = space.zero()
    assert v.interior.shape == (space.mesh.n_triangles, 3)
    assert v.edge.shape == (space.n_interior_edges, 1)
    w = 2 * (v + v) - v
    assert np.all(w.coeffs == 0)
    with pytest.raises(ValueError):
        v + WgSpace(build_unit_square(2), 1).zero()


def smooth(x, y):
    return np.exp(x) * np.sin(2 * y) + x * y


@pytest.mark.parametrize("k", [1, 2])
def test_q0_idempotent_and_orthogonal(k):
    space = WgSpace(build_unit_square(3), k)
    c = project_Q0(smooth, space)
    w = WeakFunction(space, np.concatenate([c.ravel(), np.zeros(space.nb)]))
    again = project_Q0(lambda x, y: _eval_pointwise(w, x, y), space)
    np.testing.assert_allclose(again, c, atol=1e-12)
    # residual is orthogonal to P_k on every element
    rule = quadrature_triangle(2 * k + 8)
    pts, wts = physical_points(space.mesh, rule)
    phi = space.basis.values(pts)
    resid = smooth(pts[..., 0], pts[..., 1]) - np.einsum("tqi,ti->tq", phi, c)
    np.testing.assert_allclose(np.einsum("tq,tq,tqi->ti", wts, resid, phi), 0, atol=1e-8)


def _eval_pointwise(w, x, y):
    # x, y come shaped (nt, nq) in element order
    pts = np.stack([x, y], axis=-1)
    return w.evaluate(pts)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_qb_idempotent(k):
    space = WgSpace(build_unit_square(2), k)
    coeffs = project_Qb(smooth, space)
    mesh = space.mesh
    r = quadrature_edge(2 * k + 6)
    psi = edge_basis_values(k - 1, np.broadcast_to(r.points, (mesh.n_edges, len(r.points))),
                            mesh.edge_lengths)
    vals = np.einsum("eql,el->eq", psi, coeffs)
    ws = mesh.edge_lengths[:, None] * r.weights
    again = np.einsum("eq,eq,eql->el", ws, vals, psi)
    np.testing.assert_allclose(again, coeffs, atol=1e-12)


def test_qb_exact_for_low_degree():
    # Q_b of a linear function on P_1 edges reproduces it
    space = WgSpace(build_unit_square(2), 2)
    coeffs = project_Qb(lambda x, y: 2 * x - y + 1, space)
    mesh = space.mesh
    t = np.array([0.0, 0.3, 1.0])
    psi = edge_basis_values(1, np.broadcast_to(t, (mesh.n_edges, 3)), mesh.edge_lengths)
    a = mesh.vertices[mesh.edges[:, 0]]
    b = mesh.vertices[mesh.edges[:, 1]]
    p = a[:, None] + t[None, :, None] * (b - a)[:, None]
    np.testing.assert_allclose(np.einsum("eql,el->eq", psi, coeffs),
                               2 * p[..., 0] - p[..., 1] + 1, atol=1e-13)


def test_qh_many_matches_single():
    space = WgSpace(build_l_shape(2), 2)
    fs = [smooth, lambda x, y: np.cos(x * y)]
    many = project_Qh_many(fs, space, block_size=7)
    for i, f in enumerate(fs):
        np.testing.assert_allclose(many[:, i], project_Qh(f, space).coeffs, atol=1e-14)


def test_qbold_of_constant_field():
    space = WgSpace(build_unit_square(2), 2)
    out = project_Qbold(lambda x, y: (3.0, -1.0), space, element=4)
    # first basis function is the constant 1/sqrt|T|
    area = space.mesh.areas[4]
    np.testing.assert_allclose(out[:, 0], [3 * math.sqrt(area), -math.sqrt(area)], rtol=1e-13)
    np.testing.assert_allclose(out[:, 1:], 0, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(k=st.integers(1, 3), scale=st.floats(0.1, 10.0))
def test_l2_error_of_projection_is_minimal(k, scale):
    space = WgSpace(build_unit_square(2), k)
    f = lambda x, y: scale * smooth(x, y)  # noqa: E731
    c = project_Q0(f, space)
    best = l2_error_Q0(f, space, c)
    perturbed = c + 1e-3 * np.ones_like(c)
    assert best <= l2_error_Q0(f, space, perturbed)
