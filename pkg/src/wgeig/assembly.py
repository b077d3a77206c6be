"""Local weak gradients and global sparse WG forms.

Local DOF layout on a triangle: ``nloc0`` interior coefficients followed by
``k`` trace coefficients for each local edge (edge ``i`` opposite vertex ``i``).
Both the element basis and the edge bases are orthonormal, so the vector mass
of ``[P_{k-1}]^2`` and every edge mass are identities; the weak gradient
coefficients are the right-hand side of its defining relation directly.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .mesh import descends_from, ancestor_at_level
from .polyspace import (WeakFunction, WgSpace, edge_basis_values, default_degree,
                        physical_points, quadrature_edge, quadrature_triangle)

BLOCK_SIZE = 8192


@dataclass(frozen=True)
class LocalOperators:
    """Element matrices for a block of triangles.

    ``grad`` has shape (nt, 2*nq, nloc): rows are x- then y-coefficients of the
    weak gradient.  ``trace`` has shape (nt, 3, k, nloc0) and holds Q_b of each
    interior basis function on each local edge.
    """

    tris: np.ndarray
    grad: np.ndarray
    trace: np.ndarray
    h: np.ndarray


@dataclass(frozen=True)
class LocalWeakGradient:
    element: int
    matrix: np.ndarray


def _outward_normals(mesh, tris):
    """Outward unit normals (nt, 3, 2) of the local edges of CCW triangles."""
    tv = mesh.triangles[tris]
    start = tv[:, [1, 2, 0]]
    end = tv[:, [2, 0, 1]]
    d = mesh.vertices[end] - mesh.vertices[start]
    length = np.hypot(d[..., 0], d[..., 1])
    normal = np.stack([d[..., 1], -d[..., 0]], axis=-1) / length[..., None]
    return normal


def local_operators(space: WgSpace, tris=None) -> LocalOperators:
    mesh, k = space.mesh, space.k
    if tris is None:
        tris = np.arange(mesh.n_triangles)
    tris = np.asarray(tris)
    basis = space.basis
    nloc0, nq = space.nloc0, space.nq
    nt = len(tris)

    rule = quadrature_triangle(2 * k)
    pts, wts = physical_points(mesh, rule, tris)
    phi = basis.values(pts, tris)
    dphix, dphiy = basis.gradients(pts, tris)
    # -(phi_j, d/dx q_a)
    wphi = (wts[..., None] * phi).transpose(0, 2, 1)
    gx0 = -np.matmul(wphi, dphix[..., :nq]).transpose(0, 2, 1)
    gy0 = -np.matmul(wphi, dphiy[..., :nq]).transpose(0, 2, 1)

    erule = quadrature_edge(2 * k)
    normal = _outward_normals(mesh, tris)
    eids = mesh.tri_edges[tris]
    # edge bases follow the global edge orientation, shared by both neighbours
    e = mesh.edges[eids]
    a = mesh.vertices[e[..., 0]]
    b = mesh.vertices[e[..., 1]]
    t = erule.points
    epts = a[:, :, None, :] + t[None, None, :, None] * (b - a)[:, :, None, :]
    elen = mesh.edge_lengths[eids]
    ew = elen[..., None] * erule.weights
    psi = edge_basis_values(k - 1, np.broadcast_to(t, (nt * 3, len(t))),
                            elen.ravel()).reshape(nt, 3, len(t), k)
    phi_e = basis.values(epts.reshape(nt, -1, 2), tris).reshape(nt, 3, len(t), nloc0)

    # <psi_l, q_a n>_e and Q_b phi_j on each edge
    wpsi = (ew[..., None] * psi).swapaxes(-1, -2)
    trace = np.matmul(wpsi, phi_e)
    edge_int = trace[..., :nq].swapaxes(-1, -2)

    grad = np.zeros((nt, 2 * nq, nloc0 + 3 * k))
    grad[:, :nq, :nloc0] = gx0
    grad[:, nq:, :nloc0] = gy0
    ex = edge_int * normal[:, :, None, None, 0]
    ey = edge_int * normal[:, :, None, None, 1]
    grad[:, :nq, nloc0:] = ex.transpose(0, 2, 1, 3).reshape(nt, nq, 3 * k)
    grad[:, nq:, nloc0:] = ey.transpose(0, 2, 1, 3).reshape(nt, nq, 3 * k)
    return LocalOperators(tris, grad, trace, space.mesh.diameters[tris])


def local_weak_gradient(space: WgSpace, element: int) -> LocalWeakGradient:
    """Matrix mapping local DOFs of ``element`` to [P_{k-1}]^2 coefficients."""
    ops = local_operators(space, [element])
    return LocalWeakGradient(int(element), ops.grad[0])


def weak_gradient(space: WgSpace, v: WeakFunction, element: int) -> np.ndarray:
    """Coefficients (2, nq) of the weak gradient of ``v`` on ``element``."""
    g = local_weak_gradient(space, element).matrix
    l2g = space.local_to_global[element]
    loc = np.where(l2g >= 0, v.coeffs[np.maximum(l2g, 0)], 0.0)
    return (g @ loc).reshape(2, space.nq)


def _stabilization_local(ops: LocalOperators, k: int, weight: np.ndarray) -> np.ndarray:
    """sum_e w_T |Q_b v0 - v_b|^2 as local matrices (nt, nloc, nloc)."""
    nt, _, _, nloc0 = ops.trace.shape
    nloc = nloc0 + 3 * k
    out = np.zeros((nt, nloc, nloc))
    for i in range(3):
        d = np.zeros((nt, k, nloc))
        d[:, :, :nloc0] = ops.trace[:, i]
        d[:, :, nloc0 + i * k: nloc0 + (i + 1) * k] -= np.eye(k)
        out += np.matmul(d.transpose(0, 2, 1), d)
    return out * weight[:, None, None]


def _symmetrize(m):
    return 0.5 * (m + m.transpose(0, 2, 1))


def _scatter_pattern(space: WgSpace):
    """Row/column indices of all kept local entries, in element order."""
    cached = getattr(space, "_scatter_cache", None)
    if cached is not None:
        return cached
    g = space.local_to_global
    n = g.shape[1]
    r = np.broadcast_to(g[:, :, None], (len(g), n, n)).ravel()
    c = np.broadcast_to(g[:, None, :], (len(g), n, n)).ravel()
    keep = np.flatnonzero((r >= 0) & (c >= 0))
    space._scatter_cache = (keep, r[keep], c[keep])
    return space._scatter_cache


def _scatter(space: WgSpace, blocks):
    """Sum element matrices (given in element order) into a CSR matrix."""
    keep, rows, cols = _scatter_pattern(space)
    vals = np.concatenate([b.ravel() for b in blocks])[keep]
    n = space.ndof
    return sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()


def _blocks(nt, block_size):
    return [np.arange(s, min(s + block_size, nt)) for s in range(0, nt, block_size)]


def _check_epsilon(epsilon):
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")


@dataclass(frozen=True, eq=False)
class AssembledForms:
    """Global matrices of a_s (``A``), s (``S``) and b_w (``B``)."""

    space: WgSpace
    epsilon: float
    A: sp.csr_matrix
    S: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def gradient_part(self) -> sp.csr_matrix:
        return (self.A - self.S).tocsr()


def assemble_stiffness(space: WgSpace, epsilon: float = 0.0, workers: int = 1,
                       block_size: int = BLOCK_SIZE):
    """Return (A, S): the a_s matrix and its stabilization part alone.

    Local matrices are computed in fixed element blocks; ``workers`` only
    changes which thread computes a block, so the result is bit-identical for
    any worker count.
    """
    _check_epsilon(epsilon)
    k = space.k
    blocks = _blocks(space.mesh.n_triangles, block_size)

    def work(tris):
        ops = local_operators(space, tris)
        stab = _symmetrize(_stabilization_local(ops, k, ops.h ** (epsilon - 1.0)))
        grad = _symmetrize(np.matmul(ops.grad.transpose(0, 2, 1), ops.grad))
        return grad + stab, stab

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(work, blocks))
    else:
        results = [work(b) for b in blocks]
    A = _scatter(space, [r[0] for r in results])
    S = _scatter(space, [r[1] for r in results])
    return A, S


def assemble_mass(space: WgSpace) -> sp.csr_matrix:
    """b_w matrix: identity on the interior block (orthonormal basis), zero on traces."""
    diag = np.concatenate([np.ones(space.n0), np.zeros(space.nb)])
    return sp.diags(diag, format="csr")


def assemble_forms(space: WgSpace, epsilon: float = 0.0, workers: int = 1) -> AssembledForms:
    A, S = assemble_stiffness(space, epsilon, workers=workers)
    return AssembledForms(space, float(epsilon), A, S, assemble_mass(space))


def assemble_v_norm(space: WgSpace) -> sp.csr_matrix:
    """Matrix of ||v||_V^2: broken H1 seminorm of v0 plus h_T^{-1} trace mismatch."""
    ops = local_operators(space)
    k = space.k
    rule = quadrature_triangle(2 * k)
    pts, wts = physical_points(space.mesh, rule)
    gx, gy = space.basis.gradients(pts)
    stiff = (np.einsum("tq,tqa,tqb->tab", wts, gx, gx)
             + np.einsum("tq,tqa,tqb->tab", wts, gy, gy))
    local = _stabilization_local(ops, k, 1.0 / ops.h)
    local[:, :space.nloc0, :space.nloc0] += stiff
    return _scatter(space, [_symmetrize(local)])


def assemble_load(f, space: WgSpace, degree: int | None = None) -> np.ndarray:
    """Vector of (f, phi_i0); trace entries are zero."""
    from .polyspace import project_Q0  # orthonormal basis: load == Q0 coefficients
    out = np.zeros(space.ndof)
    out[:space.n0] = project_Q0(f, space, degree).ravel()
    return out


def assemble_cross_mass(trial: WeakFunction, test_space: WgSpace,
                        degree: int | None = None) -> np.ndarray:
    """f_i = b_w(trial, phi_i) for basis functions phi_i of ``test_space``.

    ``trial`` may live on a coarser mesh from which ``test_space.mesh`` was
    refined (two-grid), or on the same mesh with a degree not above the test
    degree (two-space).
    """
    src = trial.space
    if src.k > test_space.k:
        raise ValueError(f"trial degree {src.k} exceeds test degree {test_space.k}")
    fine = test_space.mesh
    if src.mesh is fine:
        anc = np.arange(fine.n_triangles)
    elif descends_from(fine, src.mesh):
        anc = ancestor_at_level(fine, np.arange(fine.n_triangles), src.mesh.level)
    else:
        raise ValueError("test mesh is not a refinement of the trial mesh")

    rule = quadrature_triangle(degree if degree is not None else src.k + test_space.k)
    out = np.zeros(test_space.ndof)
    for tris in _blocks(fine.n_triangles, BLOCK_SIZE):
        pts, wts = physical_points(fine, rule, tris)
        coarse_vals = trial.evaluate(pts, anc[tris])
        phi = test_space.basis.values(pts, tris)
        out[tris[0] * test_space.nloc0:(tris[-1] + 1) * test_space.nloc0] = np.einsum(
            "tq,tq,tqi->ti", wts, coarse_vals, phi).ravel()
    return out


def write_matrix_market(path, matrix, comment: str = "") -> None:
    """Dump a symmetric sparse matrix in Matrix Market coordinate format."""
    scipy.io.mmwrite(path, sp.coo_matrix(matrix), comment=comment, symmetry="symmetric")


__all__ = [
    "AssembledForms", "LocalOperators", "LocalWeakGradient", "assemble_cross_mass",
    "assemble_forms", "assemble_load", "assemble_mass", "assemble_stiffness",
    "assemble_v_norm", "default_degree", "local_operators", "local_weak_gradient",
    "weak_gradient", "write_matrix_market",
]
