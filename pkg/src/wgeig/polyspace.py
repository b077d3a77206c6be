"""Quadrature, orthonormal element/edge bases, the WG space and L2 projections.

Element bases are monomials in centroid-shifted, diameter-scaled coordinates,
orthonormalized against the element mass matrix by a Cholesky factor.  Because
the monomials are ordered by total degree and the factor is triangular, the
first ``dim P_m`` basis functions span ``P_m`` for every ``m <= k``; the
``[P_{k-1}]^2`` test space of the weak gradient is taken from that prefix.

Edge bases are Legendre polynomials in the arc-length parameter running from
the lower- to the higher-numbered vertex, scaled to be orthonormal on the edge.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np
from numpy.polynomial import legendre
from scipy.special import roots_jacobi

from .mesh import Mesh

MAX_QUADRATURE_DEGREE = 60


def dim_pk(k: int) -> int:
    """Dimension of P_k on a triangle."""
    return (k + 1) * (k + 2) // 2 if k >= 0 else 0


@dataclass(frozen=True)
class QuadratureRule:
    """Points in reference coordinates and weights on the reference element.

    Triangle rules live on {x, y >= 0, x + y <= 1} (area 1/2); edge rules on
    [0, 1] (length 1).
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


@lru_cache(maxsize=None)
def quadrature_triangle(degree: int) -> QuadratureRule:
    """Collapsed Gauss-Jacobi product rule exact for polynomials of ``degree``."""
    if degree < 0 or degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = max(1, (degree + 2) // 2)
    tj, wj = roots_jacobi(n, 1.0, 0.0)
    tl, wl = legendre.leggauss(n)
    u = 0.5 * (1.0 + tj)
    v = 0.5 * (1.0 + tl)
    x = np.repeat(u, n)
    y = np.outer(1.0 - u, v).ravel()
    w = np.outer(wj, wl).ravel() / 8.0
    pts = np.stack([x, y], axis=1)
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(pts, w, degree)


@lru_cache(maxsize=None)
def quadrature_edge(degree: int) -> QuadratureRule:
    """Gauss-Legendre rule on [0, 1] exact for ``degree``."""
    if degree < 0 or degree > MAX_QUADRATURE_DEGREE:
        raise ValueError(f"unsupported quadrature degree {degree}")
    n = max(1, (degree + 2) // 2)
    t, w = legendre.leggauss(n)
    pts = 0.5 * (1.0 + t)
    w = 0.5 * w
    pts.flags.writeable = False
    w.flags.writeable = False
    return QuadratureRule(pts, w, degree)


def monomial_exponents(k: int) -> np.ndarray:
    """Exponent pairs (a, b) of x^a y^b, graded by total degree."""
    return np.array([(d - j, j) for d in range(k + 1) for j in range(d + 1)],
                    dtype=np.int64)


def _monomials(xi, eta, k):
    """Values of graded monomials, shape ``xi.shape + (dim_pk(k),)``."""
    exps = monomial_exponents(k)
    px = np.stack([xi ** a for a in range(k + 1)], axis=-1)
    py = np.stack([eta ** b for b in range(k + 1)], axis=-1)
    return px[..., exps[:, 0]] * py[..., exps[:, 1]]


def _monomial_grads(xi, eta, k):
    """d/dxi and d/deta of graded monomials."""
    exps = monomial_exponents(k)
    px = np.stack([xi ** a for a in range(k + 1)], axis=-1)
    py = np.stack([eta ** b for b in range(k + 1)], axis=-1)
    zero = np.zeros_like(xi)[..., None]
    dpx = np.concatenate([zero, px[..., :-1] * np.arange(1, k + 1)], axis=-1)
    dpy = np.concatenate([zero, py[..., :-1] * np.arange(1, k + 1)], axis=-1)
    gx = dpx[..., exps[:, 0]] * py[..., exps[:, 1]]
    gy = px[..., exps[:, 0]] * dpy[..., exps[:, 1]]
    return gx, gy


def physical_points(mesh: Mesh, rule: QuadratureRule, tris=None):
    """Map a triangle rule to physical points; returns (points, weights).

    ``points`` has shape (nt, nq, 2) and ``weights`` (nt, nq).
    """
    if tris is None:
        tris = slice(None)
    p = mesh.vertices[mesh.triangles[tris]]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    x = rule.points
    pts = (p[:, None, 0, :] + x[None, :, 0, None] * d1[:, None, :]
           + x[None, :, 1, None] * d2[:, None, :])
    jac = np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
    return pts, jac[:, None] * rule.weights[None, :]


class ElementBasis:
    """Orthonormal P_k bases on every triangle of a mesh."""

    def __init__(self, mesh: Mesh, k: int):
        if k < 0:
            raise ValueError("degree must be >= 0")
        self.mesh = mesh
        self.k = k
        self.dim = dim_pk(k)
        self.centers = mesh.centroids
        self.scales = mesh.diameters
        rule = quadrature_triangle(2 * k)
        pts, wts = physical_points(mesh, rule)
        m = self._raw(pts, np.arange(mesh.n_triangles))
        mass = np.matmul((wts[..., None] * m).swapaxes(1, 2), m)
        try:
            chol = np.linalg.cholesky(mass)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("singular element mass matrix "
                                        "(degenerate triangle?)") from exc
        eye = np.broadcast_to(np.eye(self.dim), mass.shape)
        # phi = R m with R = L^{-1}
        self.coeffs = np.linalg.solve(chol, eye)

    def _local(self, pts, tris):
        c = self.centers[tris]
        s = self.scales[tris]
        shape = (-1,) + (1,) * (pts.ndim - 2)
        xi = (pts[..., 0] - c[:, 0].reshape(shape)) / s.reshape(shape)
        eta = (pts[..., 1] - c[:, 1].reshape(shape)) / s.reshape(shape)
        return xi, eta, s

    def _raw(self, pts, tris):
        xi, eta, _ = self._local(pts, tris)
        return _monomials(xi, eta, self.k)

    def values(self, pts, tris=None) -> np.ndarray:
        """Basis values at ``pts`` (shape (nt, nq, 2)) -> (nt, nq, dim)."""
        if tris is None:
            tris = np.arange(self.mesh.n_triangles)
        m = self._raw(pts, tris)
        return np.matmul(m, self.coeffs[tris].swapaxes(1, 2))

    def gradients(self, pts, tris=None):
        """Physical gradients of the basis -> two arrays (nt, nq, dim)."""
        if tris is None:
            tris = np.arange(self.mesh.n_triangles)
        xi, eta, s = self._local(pts, tris)
        gx, gy = _monomial_grads(xi, eta, self.k)
        r = self.coeffs[tris]
        inv = (1.0 / s)[:, None, None]
        return (np.matmul(gx, r.swapaxes(1, 2)) * inv,
                np.matmul(gy, r.swapaxes(1, 2)) * inv)


def edge_basis_values(k: int, t: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    """Orthonormal P_k values on edges at parameters ``t`` (ne, nq) -> (ne, nq, k+1)."""
    vals = legendre.legvander(2.0 * t - 1.0, k)
    scale = np.sqrt((2 * np.arange(k + 1) + 1)[None, :] / lengths[:, None])
    return vals * scale[:, None, :]


class WgSpace:
    """Degree-k weak Galerkin space on a triangulation.

    Interior DOFs come first (``nloc0`` per triangle, triangle-major), then
    ``k`` trace DOFs per interior edge in mesh edge order.  Boundary edges
    carry no DOFs, which enforces ``v_b = 0`` on the domain boundary.
    """

    def __init__(self, mesh: Mesh, k: int):
        if int(k) != k or k < 1:
            raise ValueError("WG degree k must be an integer >= 1")
        self.mesh = mesh
        self.k = int(k)
        self.nloc0 = dim_pk(self.k)
        self.nq = dim_pk(self.k - 1)
        nt = mesh.n_triangles
        self.n0 = nt * self.nloc0
        interior = ~mesh.boundary
        self.edge_index = np.full(mesh.n_edges, -1, dtype=np.int64)
        self.edge_index[interior] = np.arange(int(interior.sum()))
        self.n_interior_edges = int(interior.sum())
        self.nb = self.n_interior_edges * self.k
        self.ndof = self.n0 + self.nb

    def __repr__(self):
        return (f"WgSpace(k={self.k}, triangles={self.mesh.n_triangles}, "
                f"n0={self.n0}, nb={self.nb})")

    @cached_property
    def basis(self) -> ElementBasis:
        return ElementBasis(self.mesh, self.k)

    def interior_dofs(self, tris=None) -> np.ndarray:
        if tris is None:
            tris = np.arange(self.mesh.n_triangles)
        return np.asarray(tris)[:, None] * self.nloc0 + np.arange(self.nloc0)

    def edge_dofs(self, edges) -> np.ndarray:
        """Global DOFs of the given edges; rows of -1 for boundary edges."""
        idx = self.edge_index[np.asarray(edges)]
        dofs = self.n0 + idx[..., None] * self.k + np.arange(self.k)
        return np.where(idx[..., None] >= 0, dofs, -1)

    @cached_property
    def local_to_global(self) -> np.ndarray:
        """(nt, nloc0 + 3k) map; -1 marks eliminated boundary traces."""
        inner = self.interior_dofs()
        traces = self.edge_dofs(self.mesh.tri_edges).reshape(self.mesh.n_triangles, -1)
        return np.hstack([inner, traces])

    def zero(self) -> "WeakFunction":
        return WeakFunction(self, np.zeros(self.ndof))


@dataclass(eq=False)
class WeakFunction:
    """Coefficients of v = {v0, vb} in a WgSpace."""

    space: WgSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(f"expected {self.space.ndof} coefficients, "
                             f"got {self.coeffs.shape}")

    @property
    def interior(self) -> np.ndarray:
        """(nt, nloc0) view of the interior block."""
        return self.coeffs[:self.space.n0].reshape(-1, self.space.nloc0)

    @property
    def edge(self) -> np.ndarray:
        """(n_interior_edges, k) view of the trace block."""
        return self.coeffs[self.space.n0:].reshape(-1, self.space.k)

    def evaluate(self, pts, tris=None) -> np.ndarray:
        """v0 at physical points ``pts`` (nt, nq, 2) of triangles ``tris``."""
        if tris is None:
            tris = np.arange(self.space.mesh.n_triangles)
        phi = self.space.basis.values(pts, tris)
        return np.einsum("tqi,ti->tq", phi, self.interior[tris])

    def __neg__(self):
        return WeakFunction(self.space, -self.coeffs)

    def __sub__(self, other):
        _check_same(self, other)
        return WeakFunction(self.space, self.coeffs - other.coeffs)

    def __add__(self, other):
        _check_same(self, other)
        return WeakFunction(self.space, self.coeffs + other.coeffs)

    def __mul__(self, c):
        return WeakFunction(self.space, self.coeffs * c)

    __rmul__ = __mul__


def _check_same(a, b):
    if a.space is not b.space:
        raise ValueError("weak functions live in different spaces")


def default_degree(k: int) -> int:
    """Quadrature degree used when integrating analytic data against P_k."""
    return 2 * k + 6


def _call(f, pts):
    return np.asarray(f(pts[..., 0], pts[..., 1]), dtype=float) * np.ones(pts.shape[:-1])


def project_Q0(f, space: WgSpace, degree: int | None = None) -> np.ndarray:
    """Element-wise L2 projection onto P_k; returns (nt, nloc0) coefficients.

    ``f`` is called as ``f(x, y)`` with broadcastable arrays.
    """
    rule = quadrature_triangle(degree or default_degree(space.k))
    pts, wts = physical_points(space.mesh, rule)
    phi = space.basis.values(pts)
    return np.einsum("tq,tq,tqi->ti", wts, _call(f, pts), phi)


def edge_points(mesh: Mesh, rule: QuadratureRule, edges=None):
    """Physical points (ne, nq, 2), parameters (nq,) and weights (ne, nq)."""
    if edges is None:
        edges = slice(None)
    e = mesh.edges[edges]
    a = mesh.vertices[e[:, 0]]
    b = mesh.vertices[e[:, 1]]
    t = rule.points
    pts = a[:, None, :] + t[None, :, None] * (b - a)[:, None, :]
    length = np.hypot(*(b - a).T)
    return pts, t, length[:, None] * rule.weights[None, :]


def project_Qb(f, space: WgSpace, degree: int | None = None) -> np.ndarray:
    """Edge-wise L2 projection onto P_{k-1}(e) for every mesh edge -> (ne, k)."""
    mesh = space.mesh
    rule = quadrature_edge(degree or default_degree(space.k))
    pts, t, wts = edge_points(mesh, rule)
    psi = edge_basis_values(space.k - 1, np.broadcast_to(t, wts.shape), mesh.edge_lengths)
    return np.einsum("eq,eq,eql->el", wts, _call(f, pts), psi)


def project_Qh(f, space: WgSpace, degree: int | None = None) -> WeakFunction:
    """Q_h f = {Q0 f, Qb f}; traces on boundary edges are dropped."""
    inner = project_Q0(f, space, degree)
    traces = project_Qb(f, space, degree)[space.edge_index >= 0]
    return WeakFunction(space, np.concatenate([inner.ravel(), traces.ravel()]))


def project_Qh_many(fs, space: WgSpace, degree: int | None = None,
                    block_size: int = 16384) -> np.ndarray:
    """Columns of Q_h f for each f in ``fs`` -> (ndof, len(fs)).

    The element basis is evaluated once per block of triangles and shared by
    all functions, which matters on fine meshes.
    """
    fs = list(fs)
    rule = quadrature_triangle(degree or default_degree(space.k))
    nt = space.mesh.n_triangles
    out = np.empty((space.ndof, len(fs)))
    for start in range(0, nt, block_size):
        tris = np.arange(start, min(start + block_size, nt))
        pts, wts = physical_points(space.mesh, rule, tris)
        wphi = wts[..., None] * space.basis.values(pts, tris)
        rows = slice(start * space.nloc0, (tris[-1] + 1) * space.nloc0)
        for i, f in enumerate(fs):
            out[rows, i] = np.einsum("tq,tqi->ti", _call(f, pts), wphi).ravel()
    keep = space.edge_index >= 0
    for i, f in enumerate(fs):
        out[space.n0:, i] = project_Qb(f, space, degree)[keep].ravel()
    return out


def project_Qbold(g, space: WgSpace, element=None, degree: int | None = None) -> np.ndarray:
    """Componentwise L2 projection of a vector field onto [P_{k-1}(T)]^2.

    ``g(x, y)`` returns a pair ``(gx, gy)``.  The result has shape (2, nq)
    for a single element or (nt, 2, nq) when ``element`` is None.
    """
    tris = np.arange(space.mesh.n_triangles) if element is None else np.atleast_1d(element)
    rule = quadrature_triangle(degree or default_degree(space.k))
    pts, wts = physical_points(space.mesh, rule, tris)
    phi = space.basis.values(pts, tris)[..., :space.nq]
    gx, gy = g(pts[..., 0], pts[..., 1])
    gx = np.asarray(gx, dtype=float) * np.ones(wts.shape)
    gy = np.asarray(gy, dtype=float) * np.ones(wts.shape)
    out = np.stack([np.einsum("tq,tq,tqi->ti", wts, gx, phi),
                    np.einsum("tq,tq,tqi->ti", wts, gy, phi)], axis=1)
    return out if element is None else out[0]


def l2_error_Q0(f, space: WgSpace, coeffs: np.ndarray, degree: int | None = None) -> float:
    """||f - v0|| over the mesh for interior coefficients ``coeffs`` (nt, nloc0)."""
    rule = quadrature_triangle(degree or default_degree(space.k))
    pts, wts = physical_points(space.mesh, rule)
    phi = space.basis.values(pts)
    diff = _call(f, pts) - np.einsum("tqi,ti->tq", phi, coeffs)
    return float(np.sqrt(np.sum(wts * diff ** 2)))
