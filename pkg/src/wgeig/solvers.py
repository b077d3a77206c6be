"""Linear solves and the generalized eigenproblem A u = lambda B u.

B vanishes on the trace block, so the pencil (A, B) has infinite eigenvalues.
Eliminating traces gives the symmetric-definite pencil (S, M0) on interior
DOFs with S = A00 - A0b Abb^{-1} Ab0.  S is dense in general and is never
formed outside the dense oracle: shift-invert with shift 0 only needs S^{-1},
which is the interior block of A^{-1}.  Solves with A in turn eliminate the
element-local interior block (A00 is block diagonal) and factor the sparse
trace Schur complement K = Abb - Ab0 A00^{-1} A0b.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sl
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .polyspace import WeakFunction, WgSpace

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
MAX_ITER = 500
CLUSTER_GAP = 1e-6
# below this many interior DOFs a dense condensed solve beats ARPACK
DENSE_LIMIT = 400


class SolverError(RuntimeError):
    """Factorization failure or non-convergence."""


def _splu(mat):
    try:
        return spla.splu(sp.csc_matrix(mat), permc_spec="MMD_AT_PLUS_A",
                         options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise SolverError(f"sparse factorization failed: {exc}") from exc


def _trace_order(space: WgSpace) -> np.ndarray:
    """Trace DOFs sorted by edge midpoint, y first."""
    mesh = space.mesh
    interior = np.flatnonzero(space.edge_index >= 0)
    mid = mesh.vertices[mesh.edges[interior]].mean(axis=1)
    order = space.edge_index[interior][np.lexsort((mid[:, 0], mid[:, 1]))]
    return (order[:, None] * space.k + np.arange(space.k)).ravel()


class HybridSolver:
    """Direct solver for a WG stiffness matrix via elimination of interior DOFs."""

    def __init__(self, A, space: WgSpace):
        A = sp.csr_matrix(A)
        n0, nl = space.n0, space.nloc0
        nt = space.mesh.n_triangles
        self.space = space
        self.A = A
        self.n0 = n0
        A00 = A[:n0, :n0].tocoo()
        if np.any(A00.row // nl != A00.col // nl):
            raise SolverError("interior block is not element-diagonal")
        blocks = np.zeros((nt, nl, nl))
        blocks[A00.row // nl, A00.row % nl, A00.col % nl] = A00.data
        try:
            chol = np.linalg.cholesky(blocks)
        except np.linalg.LinAlgError as exc:
            raise SolverError("interior block is not positive definite") from exc
        eye = np.broadcast_to(np.eye(nl), blocks.shape)
        linv = np.linalg.solve(chol, eye)
        self._A00inv_blocks = np.matmul(linv.swapaxes(1, 2), linv)
        idx = np.arange(n0).reshape(nt, nl)
        self.A00inv = sp.csr_matrix(
            (self._A00inv_blocks.ravel(),
             (np.repeat(idx, nl, axis=1).ravel(), np.tile(idx, (1, nl)).ravel())),
            shape=(n0, n0))
        self.A0b = A[:n0, n0:].tocsr()
        self.Ab0 = A[n0:, :n0].tocsr()
        self.Abb = A[n0:, n0:].tocsr()
        if space.nb:
            K = self.Abb - self.Ab0 @ self.A00inv @ self.A0b
            # refined meshes number edges hierarchically, which makes the MMD
            # ordering very slow; a geometric presort keeps it fast
            self._perm = _trace_order(space)
            self._K = _splu(K[self._perm][:, self._perm])
        else:
            self._K = None

    def _apply_A00inv(self, x):
        return self.A00inv @ x

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        r0, rb = rhs[:self.n0], rhs[self.n0:]
        y0 = self._apply_A00inv(r0)
        if self._K is None:
            return y0.copy()
        ub = np.empty_like(rb)
        ub[self._perm] = self._K.solve((rb - self.Ab0 @ y0)[self._perm])
        u0 = self._apply_A00inv(r0 - self.A0b @ ub)
        return np.concatenate([u0, ub])


def linear_solve(A, rhs, tol: float = DEFAULT_TOL, space: WgSpace | None = None,
                 solver: HybridSolver | None = None, max_refine: int = 3) -> np.ndarray:
    """Solve A x = rhs with ||A x - rhs|| <= tol ||rhs|| (direct + refinement)."""
    rhs = np.asarray(rhs, dtype=float)
    nrm = np.linalg.norm(rhs)
    if nrm == 0.0:
        return np.zeros_like(rhs)
    if solver is None:
        if space is not None:
            solver = HybridSolver(A, space)
        else:
            lu = _splu(A)
            solver = type("LU", (), {"solve": staticmethod(lu.solve)})
    x = solver.solve(rhs)
    for _ in range(max_refine):
        res = rhs - A @ x
        if np.linalg.norm(res) <= tol * nrm:
            return x
        x = x + solver.solve(res)
    res = np.linalg.norm(rhs - A @ x)
    if res > tol * nrm:
        raise SolverError(f"linear solve residual {res / nrm:.2e} exceeds tolerance {tol:.1e}")
    return x


@dataclass
class Condensed:
    """The pencil (S, M0) on interior DOFs, with S kept implicit."""

    space: WgSpace
    A: sp.csr_matrix
    M0: sp.csr_matrix
    _solver: HybridSolver | None = field(default=None, repr=False)
    _Abb_lu: object = field(default=None, repr=False)

    @property
    def solver(self) -> HybridSolver:
        if self._solver is None:
            self._solver = HybridSolver(self.A, self.space)
        return self._solver

    @property
    def n(self) -> int:
        return self.space.n0

    def _abb(self):
        if self._Abb_lu is None and self.space.nb:
            n0 = self.space.n0
            self._Abb_lu = _splu(self.A[n0:, n0:])
        return self._Abb_lu

    def recover(self, u0: np.ndarray) -> np.ndarray:
        """Full vector [u0; ub] with ub = -Abb^{-1} Ab0 u0."""
        if not self.space.nb:
            return np.asarray(u0, dtype=float).copy()
        ub = -self._abb().solve(self.A[self.n:, :self.n] @ u0)
        return np.concatenate([u0, ub])

    def apply(self, x0: np.ndarray) -> np.ndarray:
        """S x0."""
        full = self.recover(x0)
        return (self.A @ full)[:self.n]

    def solve(self, x0: np.ndarray) -> np.ndarray:
        """S^{-1} x0, the interior block of A^{-1} [x0; 0]."""
        rhs = np.zeros(self.space.ndof)
        rhs[:self.n] = x0
        return self.solver.solve(rhs)[:self.n]

    def dense(self, A: np.ndarray | None = None) -> np.ndarray:
        A = self.A.toarray() if A is None else A
        n = self.n
        if not self.space.nb:
            return A
        S = A[:n, :n] - A[:n, n:] @ sl.solve(A[n:, n:], A[n:, :n], assume_a="pos")
        return 0.5 * (S + S.T)


def condense(A, B, space: WgSpace, solver: HybridSolver | None = None) -> Condensed:
    """Eliminate trace DOFs from the pencil (A, B)."""
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    n0 = space.n0
    if B[n0:, :].count_nonzero() or B[:, n0:].count_nonzero():
        raise ValueError("mass matrix must vanish on the trace block")
    return Condensed(space, A, B[:n0, :n0].tocsr(), solver)


@dataclass
class EigenResult:
    """Eigenpairs in ascending order; vectors normalized so that ||u||_b = 1."""

    eigenvalues: np.ndarray
    vectors: np.ndarray           # (ndof, nev)
    residuals: np.ndarray
    iterations: int
    space: WgSpace | None = None
    clusters: list = field(default_factory=list)

    def function(self, j: int) -> WeakFunction:
        """0-based j-th eigenfunction as a WeakFunction."""
        return WeakFunction(self.space, self.vectors[:, j])

    def __len__(self):
        return len(self.eigenvalues)


def find_clusters(values, gap: float = CLUSTER_GAP) -> list[list[int]]:
    """Group indices of ascending ``values`` whose relative spacing is below ``gap``."""
    groups = []
    for i, v in enumerate(values):
        if groups and abs(v - values[groups[-1][-1]]) <= gap * abs(v):
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def _fix_signs(vecs, n0):
    for j in range(vecs.shape[1]):
        inner = vecs[:n0, j]
        i = int(np.argmax(np.abs(inner)))
        if inner[i] < 0:
            vecs[:, j] *= -1.0


def eigensolve(A, B, nev: int, tol: float = DEFAULT_TOL,
               mode: str = "condensed_shift_invert", space: WgSpace | None = None,
               condensed: Condensed | None = None, maxiter: int = MAX_ITER) -> EigenResult:
    """The ``nev`` smallest finite eigenpairs of A u = lambda B u.

    With a ``space`` the trace block is condensed out first.  Without one, B
    must be positive definite and the pencil is solved as given.
    """
    if nev < 1:
        raise ValueError("nev must be >= 1")
    if space is None:
        return _eigensolve_definite(A, B, nev, tol, mode, maxiter)
    if nev > space.n0:
        raise ValueError(f"nev={nev} exceeds the {space.n0} finite eigenvalues")
    cond = condensed or condense(A, B, space)
    n0 = space.n0
    iterations = 0
    identity_mass = (cond.M0 - sp.identity(n0)).count_nonzero() == 0 if n0 else True

    dense = mode == "dense_oracle" or nev >= n0 - 1 or (
        mode == "condensed_shift_invert" and n0 <= DENSE_LIMIT)
    if dense:
        Ad = cond.A.toarray()
        S_bb, S_b0 = Ad[n0:, n0:], Ad[n0:, :n0]
        S = cond.dense(Ad)
        if identity_mass:
            w, v0 = sl.eigh(S, subset_by_index=[0, nev - 1], driver="evr")
        else:
            w, v0 = sl.eigh(S, cond.M0.toarray(), subset_by_index=[0, nev - 1])
    elif mode == "condensed_shift_invert":
        counter = [0]

        def op_inv(x):
            counter[0] += 1
            return cond.solve(x)

        opinv = spla.LinearOperator((n0, n0), matvec=op_inv, dtype=float)
        sop = spla.LinearOperator((n0, n0), matvec=cond.apply, dtype=float)
        rng = np.random.default_rng(12345)
        start = rng.standard_normal(n0)
        try:
            w, v0 = spla.eigsh(sop, k=nev, M=None if identity_mass else cond.M0,
                               sigma=0.0, which="LM", OPinv=opinv, v0=start,
                               tol=tol * 1e-2, maxiter=maxiter,
                               ncv=min(n0, max(2 * nev + 1, 20)))
        except spla.ArpackNoConvergence as exc:
            raise SolverError(f"eigensolver did not converge: {len(exc.eigenvalues)} "
                              f"of {nev} pairs after {maxiter} iterations") from exc
        iterations = counter[0]
    else:
        raise ValueError(f"unknown eigensolver mode {mode!r}")

    order = np.argsort(w)
    w = w[order]
    v0 = v0[:, order]
    # B-orthonormalize within the computed basis to remove roundoff drift
    gram = v0.T @ (cond.M0 @ v0)
    chol = np.linalg.cholesky(0.5 * (gram + gram.T))
    v0 = sl.solve_triangular(chol, v0.T, lower=True).T
    if dense:
        vecs = np.vstack([v0, -sl.solve(S_bb, S_b0 @ v0, assume_a="pos")]) if space.nb else v0
    else:
        # A x = w B x gives the trace block from the factorization already at hand
        rhs = np.zeros((space.ndof, nev))
        rhs[:n0] = cond.M0 @ v0
        vecs = np.column_stack([w[j] * cond.solver.solve(rhs[:, j]) for j in range(nev)])
        vecs[:n0] = v0
    _fix_signs(vecs, n0)
    A = cond.A
    Bfull = sp.csr_matrix(B)
    residuals = np.linalg.norm(A @ vecs - (Bfull @ vecs) * w, axis=0)
    return EigenResult(w, vecs, residuals, iterations, space, find_clusters(w))


def _eigensolve_definite(A, B, nev, tol, mode, maxiter):
    A = sp.csr_matrix(A)
    B = sp.csr_matrix(B)
    n = A.shape[0]
    if nev > n:
        raise ValueError(f"nev={nev} exceeds the problem size {n}")
    iterations = 0
    if mode == "dense_oracle" or nev >= n - 1:
        w, v = sl.eigh(A.toarray(), B.toarray(), subset_by_index=[0, nev - 1])
    elif mode == "condensed_shift_invert":
        lu = _splu(A)
        counter = [0]

        def op_inv(x):
            counter[0] += 1
            return lu.solve(x)

        opinv = spla.LinearOperator((n, n), matvec=op_inv, dtype=float)
        start = np.random.default_rng(12345).standard_normal(n)
        try:
            w, v = spla.eigsh(A, k=nev, M=B, sigma=0.0, OPinv=opinv, v0=start,
                              tol=tol * 1e-2, maxiter=maxiter,
                              ncv=min(n, max(2 * nev + 1, 20)))
        except spla.ArpackNoConvergence as exc:
            raise SolverError("eigensolver did not converge") from exc
        iterations = counter[0]
    else:
        raise ValueError(f"unknown eigensolver mode {mode!r}")
    order = np.argsort(w)
    w, v = w[order], v[:, order]
    gram = v.T @ (B @ v)
    chol = np.linalg.cholesky(0.5 * (gram + gram.T))
    v = sl.solve_triangular(chol, v.T, lower=True).T
    _fix_signs(v, n)
    residuals = np.linalg.norm(A @ v - (B @ v) * w, axis=0)
    return EigenResult(w, v, residuals, iterations, None, find_clusters(w))


def full_pencil_eigenvalues(A, B) -> np.ndarray:
    """Finite generalized eigenvalues of the dense pencil (A, B) by QZ."""
    w = sl.eig(np.asarray(A.toarray() if sp.issparse(A) else A),
               np.asarray(B.toarray() if sp.issparse(B) else B), right=False)
    w = w[np.isfinite(w)]
    return np.sort(w.real)
