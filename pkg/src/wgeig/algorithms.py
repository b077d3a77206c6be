"""Direct WG eigensolve and its two-grid and two-space accelerations."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .assembly import AssembledForms, assemble_cross_mass, assemble_forms
from .mesh import Mesh, refine
from .polyspace import WeakFunction, WgSpace
from .solvers import (DEFAULT_TOL, EigenResult, HybridSolver, SolverError,
                      eigensolve, linear_solve)

# extra coarse pairs so that a cluster containing the last requested index is complete
CLUSTER_SLACK = 2


@dataclass
class AcceleratedResult:
    """Outcome of one correction: the starting pair and the corrected pair.

    ``corrected`` is renormalized to ``||u||_b = 1``; ``value`` is its
    Rayleigh quotient.
    """

    index: int
    start_value: float
    start: WeakFunction
    corrected: WeakFunction
    value: float
    timings: dict = field(default_factory=dict)


def rayleigh_quotient(A, B, u) -> float:
    """u^T A u / u^T B u."""
    x = u.coeffs if isinstance(u, WeakFunction) else np.asarray(u)
    den = float(x @ (B @ x))
    if den <= 0.0:
        raise ZeroDivisionError("b_w(u, u) vanishes; the correction is degenerate")
    return float(x @ (A @ x)) / den


def direct_wg(mesh: Mesh, k: int, epsilon: float = 0.0, nev: int = 6,
              tol: float = DEFAULT_TOL, mode: str = "condensed_shift_invert",
              workers: int = 1) -> EigenResult:
    """The nev smallest WG eigenpairs on ``mesh``; forms are kept on the result."""
    space = WgSpace(mesh, k)
    forms = assemble_forms(space, epsilon, workers=workers)
    res = eigensolve(forms.A, forms.B, nev, tol=tol, mode=mode, space=space)
    res.forms = forms
    return res


def correction_step(value: float, start: WeakFunction, forms: AssembledForms,
                    solver: HybridSolver | None = None, tol: float = DEFAULT_TOL,
                    index: int = 1) -> AcceleratedResult:
    """Solve a_s(u, v) = value * b_w(start, v) on ``forms.space``, then take
    the Rayleigh quotient of the solution."""
    space = forms.space
    t0 = time.perf_counter()
    rhs = value * assemble_cross_mass(start, space)
    t1 = time.perf_counter()
    if solver is None:
        solver = HybridSolver(forms.A, space)
    x = linear_solve(forms.A, rhs, tol=tol, solver=solver)
    t2 = time.perf_counter()
    lam = rayleigh_quotient(forms.A, forms.B, x)
    nrm = np.sqrt(float(x @ (forms.B @ x)))
    t3 = time.perf_counter()
    return AcceleratedResult(index, float(value), start, WeakFunction(space, x / nrm), lam,
                             {"transfer": t1 - t0, "fine_solve": t2 - t1, "quotient": t3 - t2})


def _as_indices(index):
    if np.isscalar(index):
        return [int(index)], True
    return [int(j) for j in index], False


def _start_pairs(res: EigenResult, indices):
    for j in indices:
        if j < 1 or j > len(res):
            raise ValueError(f"eigenpair index {j} not available (1..{len(res)})")
    return [(float(res.eigenvalues[j - 1]), res.function(j - 1)) for j in indices]


def _accelerate(start: EigenResult, indices, fine_space, epsilon, tol, t_start, workers):
    t0 = time.perf_counter()
    forms = assemble_forms(fine_space, epsilon, workers=workers)
    solver = HybridSolver(forms.A, fine_space)
    t_setup = time.perf_counter() - t0
    out = []
    for j, (lam, u) in zip(indices, _start_pairs(start, indices)):
        r = correction_step(lam, u, forms, solver, tol, index=j)
        if not np.isfinite(r.value) or r.value <= 0.0:
            raise SolverError(f"degenerate corrected eigenvalue for index {j}")
        r.timings = {"coarse_solve": t_start, "fine_setup": t_setup, **r.timings}
        out.append(r)
    return out, forms


def two_grid(coarse_mesh: Mesh, refinements: int, k: int, epsilon: float = 0.0,
             index: int | Sequence[int] = 1, tol: float = DEFAULT_TOL,
             workers: int = 1, return_forms: bool = False):
    """Coarse eigensolve, one fine linear solve per index, Rayleigh quotient.

    ``index`` is 1-based; pass a sequence to correct several pairs with one
    fine factorization.  Returns one AcceleratedResult or a list of them.
    """
    if refinements < 1:
        raise ValueError("two_grid needs at least one refinement; use correction_step "
                         "for same-space corrections")
    indices, single = _as_indices(index)
    t0 = time.perf_counter()
    coarse_space = WgSpace(coarse_mesh, k)
    coarse_forms = assemble_forms(coarse_space, epsilon, workers=workers)
    nev = min(max(indices) + CLUSTER_SLACK, coarse_space.n0)
    start = eigensolve(coarse_forms.A, coarse_forms.B, nev, tol=tol, space=coarse_space)
    t_coarse = time.perf_counter() - t0

    fine_mesh = refine(coarse_mesh, refinements)
    results, forms = _accelerate(start, indices, WgSpace(fine_mesh, k), epsilon, tol,
                                 t_coarse, workers)
    out = results[0] if single else results
    return (out, forms) if return_forms else out


def two_space(mesh: Mesh, k1: int, k2: int, epsilon: float = 0.0,
              index: int | Sequence[int] = 1, tol: float = DEFAULT_TOL,
              workers: int = 1, return_forms: bool = False):
    """Degree-k1 eigensolve, one degree-k2 linear solve per index, Rayleigh quotient."""
    if not 1 <= k1 <= k2:
        raise ValueError(f"need 1 <= k1 <= k2, got k1={k1}, k2={k2}")
    indices, single = _as_indices(index)
    t0 = time.perf_counter()
    low = WgSpace(mesh, k1)
    low_forms = assemble_forms(low, epsilon, workers=workers)
    nev = min(max(indices) + CLUSTER_SLACK, low.n0)
    start = eigensolve(low_forms.A, low_forms.B, nev, tol=tol, space=low)
    t_low = time.perf_counter() - t0

    high = low if k2 == k1 else WgSpace(mesh, k2)
    results, forms = _accelerate(start, indices, high, epsilon, tol, t_low, workers)
    out = results[0] if single else results
    return (out, forms) if return_forms else out


__all__ = ["AcceleratedResult", "correction_step", "direct_wg", "rayleigh_quotient",
           "two_grid", "two_space"]
