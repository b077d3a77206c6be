"""Reference spectra, error norms, convergence orders and lower-bound checks."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .assembly import AssembledForms, assemble_v_norm
from .polyspace import (WeakFunction, WgSpace, physical_points, project_Qh_many,
                        quadrature_triangle)


# ---------------------------------------------------------------- spectra

@dataclass(frozen=True)
class Eigenpair:
    value: float
    functions: tuple  # L2-orthonormal closures f(x, y) spanning the eigenspace
    labels: tuple = ()


@dataclass(frozen=True)
class ExactSpectrum:
    """Ascending exact eigenvalues; each entry is one distinct eigenvalue."""

    domain: str
    pairs: tuple

    def values(self, count: int | None = None) -> np.ndarray:
        """Eigenvalues repeated by multiplicity."""
        out = [p.value for p in self.pairs for _ in p.functions]
        return np.array(out[:count] if count else out)

    def cluster_of(self, j: int) -> Eigenpair:
        """Eigenspace containing the 1-based index j (counted with multiplicity)."""
        seen = 0
        for p in self.pairs:
            seen += len(p.functions)
            if j <= seen:
                return p
        raise IndexError(f"index {j} beyond the tabulated spectrum")


def _sine_mode(m, n):
    def f(x, y):
        return 2.0 * np.sin(m * np.pi * x) * np.sin(n * np.pi * y)
    return f


def unit_square_spectrum(count: int = 6) -> ExactSpectrum:
    """(m^2 + n^2) pi^2 with eigenfunctions 2 sin(m pi x) sin(n pi y)."""
    top = int(math.isqrt(count)) + 3
    groups: dict[int, list] = {}
    for m in range(1, top + 1):
        for n in range(1, top + 1):
            groups.setdefault(m * m + n * n, []).append((m, n))
    pairs, total = [], 0
    for s in sorted(groups):
        modes = groups[s]
        pairs.append(Eigenpair(s * np.pi ** 2, tuple(_sine_mode(m, n) for m, n in modes),
                               tuple(modes)))
        total += len(modes)
        if total >= count:
            break
    return ExactSpectrum("unit_square", tuple(pairs))


def spectrum_for(domain: str, count: int = 6) -> ExactSpectrum | None:
    return unit_square_spectrum(count) if domain == "unit_square" else None


# ---------------------------------------------------------------- orders

def gamma(k: int, epsilon: float, convex: bool = True) -> float:
    """Dual-regularity exponent: 1 for k = 1 or nonconvex domains, else 2 - eps/2."""
    if k == 1 or not convex:
        return 1.0
    return 2.0 - epsilon / 2.0


@dataclass(frozen=True)
class OrderModel:
    """Predicted convergence exponents of the accelerated schemes."""

    k: int
    epsilon: float
    k2: int | None = None
    convex: bool = True
    gamma_override: float | None = None

    @property
    def gamma(self) -> float:
        if self.gamma_override is not None:
            return self.gamma_override
        return gamma(self.k, self.epsilon, self.convex)

    @property
    def k_bar(self) -> float:
        return min(2 * self.k - 2 * self.epsilon, self.k + self.gamma - self.epsilon)

    @property
    def k_hat(self) -> float:
        return min(4 * self.k - 4 * self.epsilon, 2 * self.k + 2 * self.gamma - 2 * self.epsilon)

    def two_grid_eigenvalue(self, h_exponent: float) -> float:
        """Order in H when h = H**h_exponent: min(2 kbar, (2k - 2eps) * h_exponent)."""
        return min(2 * self.k_bar, (2 * self.k - 2 * self.epsilon) * h_exponent)

    def two_grid_eigenfunction(self, h_exponent: float) -> float:
        return min(self.k_bar, (self.k - self.epsilon) * h_exponent)

    def two_space_eigenvalue(self) -> float:
        if self.k2 is None:
            raise ValueError("two-space orders need k2")
        return min(self.k_hat, 2 * self.k2 - 2 * self.epsilon)

    def two_grid_lower_bound_holds(self, h_exponent: float) -> bool:
        """Sufficient condition H^{2 kbar} <= C h^{2k + delta} for some delta > 0."""
        return 2 * self.k_bar > 2 * self.k * h_exponent

    def two_space_lower_bound_holds(self) -> bool:
        return self.k_hat > 2 * (self.k2 or self.k)


def observed_orders(errors: Sequence[float], sizes: Sequence[float]):
    """ln(e_i / e_{i+1}) / ln(H_i / H_{i+1}) between consecutive entries.

    Returns (orders, flags).  Negative errors enter by absolute value and are
    flagged ``"negative"``; a sign change or a zero error yields ``None`` with
    flag ``"sign_change"`` / ``"zero"``.
    """
    if len(errors) != len(sizes):
        raise ValueError("errors and sizes differ in length")
    if len(errors) < 2:
        raise ValueError("need at least two levels")
    orders, flags = [], []
    for (e0, e1), (h0, h1) in zip(zip(errors, errors[1:]), zip(sizes, sizes[1:])):
        if e0 == 0 or e1 == 0:
            orders.append(None)
            flags.append("zero")
        elif (e0 > 0) != (e1 > 0):
            orders.append(None)
            flags.append("sign_change")
        else:
            orders.append(math.log(abs(e0) / abs(e1)) / math.log(h0 / h1))
            flags.append("negative" if e0 < 0 else "")
    return orders, flags


def fit_slope(sizes: Sequence[float], errors: Sequence[float]) -> float:
    """Least-squares slope of log|error| against log(size)."""
    return float(np.polyfit(np.log(sizes), np.log(np.abs(errors)), 1)[0])


@dataclass
class ConvergenceRow:
    H: float | None
    h: float
    values: list
    eig_errors: list | None = None
    fun_errors: list | None = None
    wall_coarse: list = field(default_factory=list)  # per index, seconds
    wall_fine: list = field(default_factory=list)
    failed: str | None = None


@dataclass
class ConvergenceTable:
    algorithm: str
    domain: str
    k: int
    epsilon: float
    pattern: str
    k2: int | None = None
    rows: list = field(default_factory=list)

    def step_sizes(self) -> list:
        """H for two-grid tables (orders are reported in H), h otherwise."""
        return [r.H if r.H is not None else r.h for r in self.rows]

    def _orders(self, attr):
        good = [r for r in self.rows if r.failed is None and getattr(r, attr) is not None]
        if len(good) < 2:
            return []
        sizes = [r.H if r.H is not None else r.h for r in good]
        n = len(getattr(good[0], attr))
        return [observed_orders([getattr(r, attr)[j] for r in good], sizes) for j in range(n)]

    def eigenvalue_orders(self):
        """Per index: (orders, flags) between consecutive successful rows."""
        return self._orders("eig_errors")

    def eigenfunction_orders(self):
        return self._orders("fun_errors")


# ---------------------------------------------------------------- norms

def norm_triple_bar(forms: AssembledForms, v: WeakFunction) -> float:
    x = v.coeffs
    return math.sqrt(max(float(x @ (forms.A @ x)), 0.0))


def norm_b(forms: AssembledForms, v: WeakFunction) -> float:
    x = v.coeffs
    return math.sqrt(max(float(x @ (forms.B @ x)), 0.0))


def norm_V(space: WgSpace, v: WeakFunction, matrix=None) -> float:
    """Broken gradient of v0 plus unweighted h_T^{-1} trace mismatch."""
    V = assemble_v_norm(space) if matrix is None else matrix
    x = v.coeffs
    return math.sqrt(max(float(x @ (V @ x)), 0.0))


def eigenfunction_error(space: WgSpace, computed: WeakFunction,
                        exact_cluster: Sequence[Callable], norm: str = "triple_bar",
                        forms: AssembledForms | None = None, v_matrix=None,
                        projected: np.ndarray | None = None) -> float:
    """Distance from ``computed`` to Q_h of the best unit combination of the cluster.

    The combination direction minimizes the chosen norm by least squares over
    the cluster coefficients and is then scaled to unit L2 norm (the cluster
    closures are L2-orthonormal).  For a simple eigenvalue this reduces to
    choosing the sign.  ``projected`` may supply the Q_h images of the
    cluster (columns, as from ``project_Qh_many``) to avoid recomputing them.
    """
    if not exact_cluster:
        raise ValueError("empty eigenfunction cluster")
    if norm == "triple_bar":
        if forms is None:
            raise ValueError("triple-bar norm needs assembled forms")
        M = forms.A
    elif norm == "b":
        if forms is None:
            raise ValueError("b-norm needs assembled forms")
        M = forms.B
    elif norm == "V":
        M = assemble_v_norm(space) if v_matrix is None else v_matrix
    else:
        raise ValueError(f"unknown norm {norm!r}")
    W = project_Qh_many(exact_cluster, space) if projected is None else projected
    MW = M @ W
    gram = W.T @ MW
    rhs = MW.T @ computed.coeffs
    c = np.linalg.lstsq(gram, rhs, rcond=None)[0]
    nc = np.linalg.norm(c)
    if nc == 0.0:
        c = np.zeros(len(exact_cluster))
        c[0] = 1.0
    else:
        c = c / nc
    d = W @ c - computed.coeffs
    return math.sqrt(max(float(d @ (M @ d)), 0.0))


# ---------------------------------------------------------------- lower bounds

@dataclass
class LowerBoundReport:
    flags: list            # per index: True / False
    differences: list | None = None
    mode: str = "exact"    # "exact" or "monotone"


def lower_bound_report(exact: ExactSpectrum | Sequence[float] | None, values) -> LowerBoundReport:
    """Check lambda_j - approx_j >= 0 per index.

    Without exact values, ``values`` must be a per-level list of per-index
    approximations and the report flags strict increase across levels.
    """
    if exact is None:
        levels = np.asarray(values, dtype=float)
        if levels.ndim != 2 or len(levels) < 2:
            raise ValueError("monotone check needs at least two levels of values")
        inc = np.all(np.diff(levels, axis=0) > 0, axis=0)
        return LowerBoundReport([bool(b) for b in inc], None, "monotone")
    vals = np.asarray(values, dtype=float)
    ref = exact.values(vals.shape[-1]) if isinstance(exact, ExactSpectrum) else np.asarray(exact)
    if ref.shape[-1] != vals.shape[-1]:
        raise ValueError("index counts differ")
    diff = ref - vals
    flags = np.all(diff >= 0, axis=0) if diff.ndim == 2 else diff >= 0
    return LowerBoundReport([bool(b) for b in np.atleast_1d(flags)], diff.tolist(), "exact")


# ---------------------------------------------------------------- conforming interpolant

def conforming_interpolant(space: WgSpace, v: WeakFunction) -> np.ndarray:
    """Nodal values of the averaging interpolant into continuous P1.

    Each interior vertex gets the mean of v0|_T over the triangles sharing it;
    boundary vertices are set to zero.
    """
    mesh = space.mesh
    pts = mesh.vertices[mesh.triangles]
    vals = v.evaluate(pts)                       # (nt, 3)
    nv = mesh.n_vertices
    total = np.bincount(mesh.triangles.ravel(), weights=vals.ravel(), minlength=nv)
    count = np.bincount(mesh.triangles.ravel(), minlength=nv)
    out = total / np.maximum(count, 1)
    out[mesh.boundary_vertices()] = 0.0
    return out


def p1_gradients(mesh, nodal: np.ndarray) -> np.ndarray:
    """Constant gradient (nt, 2) of the P1 interpolant of nodal values."""
    p = mesh.vertices[mesh.triangles]
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    u = nodal[mesh.triangles]
    du1 = u[:, 1] - u[:, 0]
    du2 = u[:, 2] - u[:, 0]
    gx = (du1 * d2[:, 1] - du2 * d1[:, 1]) / det
    gy = (du2 * d1[:, 0] - du1 * d2[:, 0]) / det
    return np.stack([gx, gy], axis=1)


def p1_seminorm(mesh, nodal: np.ndarray) -> float:
    g = p1_gradients(mesh, nodal)
    return math.sqrt(float(np.sum(mesh.areas * np.sum(g ** 2, axis=1))))


def interpolant_l2_gap(space: WgSpace, v: WeakFunction, nodal: np.ndarray) -> float:
    """||v0 - P1(nodal)|| over the mesh."""
    mesh = space.mesh
    rule = quadrature_triangle(2 * space.k)
    pts, wts = physical_points(mesh, rule)
    x = rule.points
    bary = np.stack([1 - x[:, 0] - x[:, 1], x[:, 0], x[:, 1]], axis=1)
    p1 = nodal[mesh.triangles] @ bary.T
    diff = v.evaluate(pts) - p1
    return math.sqrt(float(np.sum(wts * diff ** 2)))
