import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from wgeig.assembly import assemble_forms
from wgeig.mesh import build_l_shape, build_unit_square, refine
from wgeig.polyspace import WgSpace
from wgeig.solvers import (HybridSolver, SolverError, condense, eigensolve, find_clusters,
                           full_pencil_eigenvalues, linear_solve)

# meshes with at most 2000 DOFs, used for oracle comparisons
SMALL = [
    ("unit_square", 4, "right_up", 1),
    ("unit_square", 4, "crisscross", 2),
    ("unit_square", 6, "right_down", 2),
    ("l_shape", 2, "right_up", 2),
    ("l_shape", 3, "crisscross", 1),
]


def forms_for(domain, n, pattern, k, eps=0.1):
    build = build_unit_square if domain == "unit_square" else build_l_shape
    return assemble_forms(WgSpace(build(n, pattern), k), eps)


@pytest.mark.parametrize("case", SMALL)
def test_condensed_matches_dense_oracle(case):
    forms = forms_for(*case)
    assert forms.space.ndof <= 2000
    fast = eigensolve(forms.A, forms.B, 6, space=forms.space, mode="condensed_shift_invert")
    dense = eigensolve(forms.A, forms.B, 6, space=forms.space, mode="dense_oracle")
    np.testing.assert_allclose(fast.eigenvalues, dense.eigenvalues, rtol=1e-8)


@pytest.mark.parametrize("case", SMALL[:3])
def test_matches_full_pencil(case):
    forms = forms_for(*case)
    qz = full_pencil_eigenvalues(forms.A, forms.B)
    res = eigensolve(forms.A, forms.B, 6, space=forms.space)
    np.testing.assert_allclose(res.eigenvalues, qz[:6], rtol=1e-8)
    # every finite pencil eigenvalue is positive
    assert qz.min() > 0


def test_large_problem_uses_arpack():
    # above the dense threshold the shift-invert path runs and counts solves
    forms = assemble_forms(WgSpace(build_unit_square(12), 2), 0.1)
    res = eigensolve(forms.A, forms.B, 6, space=forms.space)
    assert res.iterations > 0
    ref = eigensolve(forms.A, forms.B, 6, space=forms.space, mode="dense_oracle")
    np.testing.assert_allclose(res.eigenvalues, ref.eigenvalues, rtol=1e-8)
    np.testing.assert_allclose(np.abs(res.vectors.T @ (forms.B @ ref.vectors))[0, 0], 1.0,
                               atol=1e-8)


def test_eigenpair_properties(small_forms):
    forms = small_forms[2]
    res = eigensolve(forms.A, forms.B, 6, space=forms.space)
    assert np.all(np.diff(res.eigenvalues) >= 0)
    gram = res.vectors.T @ (forms.B @ res.vectors)
    np.testing.assert_allclose(gram, np.eye(6), atol=1e-10)
    scale = np.linalg.norm(forms.A @ res.vectors, axis=0)
    assert np.all(res.residuals <= 1e-9 * scale)
    # sign convention: largest interior coefficient positive
    n0 = forms.space.n0
    for j in range(6):
        inner = res.vectors[:n0, j]
        assert inner[np.argmax(np.abs(inner))] > 0
    assert res.function(0).coeffs.shape == (forms.space.ndof,)
    assert len(res) == 6


def test_double_eigenvalues_clustered():
    # crisscross keeps the full square symmetry, so 5 pi^2 and 10 pi^2 stay double
    sym = assemble_forms(WgSpace(build_unit_square(8, "crisscross"), 2), 0.0)
    rs = eigensolve(sym.A, sym.B, 6, space=sym.space)
    assert rs.clusters == [[0], [1, 2], [3], [4, 5]]
    # a single diagonal family only has the x <-> y reflection and splits them
    lop = assemble_forms(WgSpace(build_unit_square(8, "right_up"), 2), 0.0)
    rl = eigensolve(lop.A, lop.B, 6, space=lop.space)
    assert len(rl.clusters) == 6


def test_find_clusters():
    assert find_clusters([1.0, 2.0, 2.0 + 1e-9, 3.0]) == [[0], [1, 2], [3]]
    assert find_clusters([]) == []


def test_argument_errors(small_forms):
    forms = small_forms[1]
    with pytest.raises(ValueError):
        eigensolve(forms.A, forms.B, 0, space=forms.space)
    with pytest.raises(ValueError):
        eigensolve(forms.A, forms.B, forms.space.n0 + 1, space=forms.space)
    with pytest.raises(ValueError):
        eigensolve(forms.A, forms.B, 3, space=forms.space, mode="power")


def test_condense_requires_interior_mass(small_forms):
    forms = small_forms[1]
    bad = forms.B.tolil()
    bad[forms.space.ndof - 1, forms.space.ndof - 1] = 1.0
    with pytest.raises(ValueError):
        condense(forms.A, bad.tocsr(), forms.space)


def test_condensed_operator_consistency(small_forms, rng):
    forms = small_forms[2]
    cond = condense(forms.A, forms.B, forms.space)
    x = rng.standard_normal(cond.n)
    np.testing.assert_allclose(cond.apply(cond.solve(x)), x, atol=1e-10)
    np.testing.assert_allclose(cond.dense() @ x, cond.apply(x), atol=1e-10)
    full = cond.recover(x)
    # recovered traces make the trace block of A x vanish
    np.testing.assert_allclose((forms.A @ full)[cond.n:], 0, atol=1e-10)


@pytest.mark.parametrize("k", [1, 3])
def test_hybrid_solver_matches_direct(k, rng):
    forms = assemble_forms(WgSpace(refine(build_l_shape(2, "crisscross"), 1), k), 0.2)
    rhs = rng.standard_normal(forms.space.ndof)
    ref = spla.spsolve(forms.A.tocsc(), rhs)
    x = HybridSolver(forms.A, forms.space).solve(rhs)
    np.testing.assert_allclose(x, ref, rtol=1e-9, atol=1e-11)
    y = linear_solve(forms.A, rhs, space=forms.space)
    assert np.linalg.norm(forms.A @ y - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_linear_solve_generic_and_zero():
    n = 50
    A = sp.diags([-1, 2.5, -1], [-1, 0, 1], shape=(n, n), format="csr")
    b = np.arange(n, dtype=float)
    x = linear_solve(A, b)
    np.testing.assert_allclose(A @ x, b, atol=1e-10)
    assert np.all(linear_solve(A, np.zeros(n)) == 0)


def test_linear_solve_reports_failure():
    class Broken:
        def solve(self, rhs):
            return np.zeros_like(rhs)
    A = sp.identity(4, format="csr")
    with pytest.raises(SolverError):
        linear_solve(A, np.ones(4), solver=Broken())


def test_hybrid_rejects_indefinite_interior(small_forms):
    forms = small_forms[1]
    A = forms.A.tolil()
    A[0, 0] = -5.0
    with pytest.raises(SolverError):
        HybridSolver(A.tocsr(), forms.space)


@pytest.mark.parametrize("mode", ["condensed_shift_invert", "dense_oracle"])
def test_definite_pencil_without_space(mode):
    # 1D Dirichlet Laplacian: eigenvalues 2 - 2 cos(j pi / (n + 1))
    n = 60
    A = sp.diags([-1, 2, -1], [-1, 0, 1], shape=(n, n), format="csr")
    res = eigensolve(A, sp.identity(n, format="csr"), 4, mode=mode)
    exact = 2 - 2 * np.cos(np.arange(1, 5) * np.pi / (n + 1))
    np.testing.assert_allclose(res.eigenvalues, exact, rtol=1e-10)
