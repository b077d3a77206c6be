"""Triangulations of the unit square and the L-shape with refinement ancestry."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

PATTERNS = ("right_up", "right_down", "crisscross")


class AncestryError(ValueError):
    """Raised when a triangle cannot be traced back to the requested level."""


@dataclass(frozen=True, eq=False)
class Mesh:
    """An immutable triangulation.

    ``edges`` is sorted lexicographically with ``edges[:, 0] < edges[:, 1]``;
    ``tri_edges[t, i]`` is the edge opposite local vertex ``i`` of triangle ``t``.
    ``ancestry[l]`` maps triangles of level ``l + 1`` to their parent at level
    ``l``, relative to the level at which the hierarchy was started.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    edge_triangles: np.ndarray
    boundary: np.ndarray
    tri_edges: np.ndarray
    level: int = 0
    base_level: int = 0
    ancestry: tuple = field(default=())
    nominal_size: float = float("nan")
    coarse: "Mesh | None" = field(default=None, repr=False)

    @classmethod
    def from_triangles(cls, vertices, triangles, **kw) -> "Mesh":
        vertices = np.ascontiguousarray(vertices, dtype=float)
        triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        p = vertices[triangles]
        area2 = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                 - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        flip = area2 < 0
        if flip.any():
            triangles = triangles.copy()
            triangles[flip] = triangles[flip][:, [0, 2, 1]]

        nt = len(triangles)
        # local edge i is opposite vertex i
        local = np.stack([triangles[:, [1, 2]], triangles[:, [2, 0]],
                          triangles[:, [0, 1]]], axis=1).reshape(-1, 2)
        local = np.sort(local, axis=1)
        nv = len(vertices)
        keys, inverse = np.unique(local[:, 0] * nv + local[:, 1], return_inverse=True)
        edges = np.stack(np.divmod(keys, nv), axis=1)
        inverse = inverse.reshape(-1)
        tri_edges = inverse.reshape(nt, 3)

        owner = np.repeat(np.arange(nt), 3)
        order = np.argsort(inverse, kind="stable")
        counts = np.bincount(inverse, minlength=len(edges))
        if counts.max() > 2:
            raise ValueError("non-manifold triangulation")
        edge_triangles = np.full((len(edges), 2), -1, dtype=np.int64)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        edge_triangles[:, 0] = owner[order[starts]]
        two = counts == 2
        edge_triangles[two, 1] = owner[order[starts[two] + 1]]
        boundary = counts == 1
        return cls(vertices, triangles, edges, edge_triangles, boundary,
                   tri_edges, **kw)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def interior_edges(self) -> np.ndarray:
        return np.flatnonzero(~self.boundary)

    @cached_property
    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @cached_property
    def edge_lengths(self) -> np.ndarray:
        d = self.vertices[self.edges[:, 1]] - self.vertices[self.edges[:, 0]]
        return np.hypot(d[:, 0], d[:, 1])

    @cached_property
    def diameters(self) -> np.ndarray:
        """Per-triangle diameter ``h_T`` (longest edge)."""
        return self.edge_lengths[self.tri_edges].max(axis=1)

    @property
    def h(self) -> float:
        return float(self.diameters.max())

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_triangles

    def boundary_vertices(self) -> np.ndarray:
        return np.unique(self.edges[self.boundary])

    def to_text(self) -> str:
        """Plain-text dump: header, coordinate lines, index triples."""
        lines = [f"vertices {self.n_vertices} triangles {self.n_triangles}"]
        lines += [f"{x:.17g} {y:.17g}" for x, y in self.vertices]
        lines += [f"{a} {b} {c}" for a, b, c in self.triangles]
        return "\n".join(lines) + "\n"


def _grid_triangles(n, origin, cells, diagonal):
    """Split the listed ``cells`` (integer (i, j) pairs) of an n-per-unit grid."""
    if diagonal not in PATTERNS:
        raise ValueError(f"unknown diagonal pattern {diagonal!r}")
    x0, y0 = origin
    cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
    corners = {}
    verts = []

    def vid(key, xy):
        idx = corners.get(key)
        if idx is None:
            idx = corners[key] = len(verts)
            verts.append(xy)
        return idx

    tris = []
    for i, j in cells:
        # half-integer keys for cell centres keep the lookup exact
        a = vid((2 * i, 2 * j), (x0 + i / n, y0 + j / n))
        b = vid((2 * i + 2, 2 * j), (x0 + (i + 1) / n, y0 + j / n))
        c = vid((2 * i + 2, 2 * j + 2), (x0 + (i + 1) / n, y0 + (j + 1) / n))
        d = vid((2 * i, 2 * j + 2), (x0 + i / n, y0 + (j + 1) / n))
        if diagonal == "right_up":
            tris += [(a, b, c), (a, c, d)]
        elif diagonal == "right_down":
            tris += [(a, b, d), (b, c, d)]
        else:
            m = vid((2 * i + 1, 2 * j + 1),
                    (x0 + (i + 0.5) / n, y0 + (j + 0.5) / n))
            tris += [(a, b, m), (b, c, m), (c, d, m), (d, a, m)]
    return np.array(verts, dtype=float), np.array(tris, dtype=np.int64)


def build_unit_square(n: int, diagonal: str = "right_up") -> Mesh:
    """Uniform n-by-n triangulation of (0, 1)^2."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cells = [(i, j) for j in range(n) for i in range(n)]
    v, t = _grid_triangles(n, (0.0, 0.0), cells, diagonal)
    return Mesh.from_triangles(v, t, nominal_size=1.0 / n)


def build_l_shape(n: int, diagonal: str = "right_up") -> Mesh:
    """Triangulation of (-1, 1)^2 minus [0, 1)^2 with n cells per unit length."""
    if n < 1:
        raise ValueError("n must be >= 1")
    cells = [(i, j) for j in range(2 * n) for i in range(2 * n)
             if not (i >= n and j >= n)]
    v, t = _grid_triangles(n, (-1.0, -1.0), cells, diagonal)
    return Mesh.from_triangles(v, t, nominal_size=1.0 / n)


def refine_uniform(mesh: Mesh) -> Mesh:
    """Red refinement: every triangle is split into four via edge midpoints.

    Children of triangle ``t`` are ``4t .. 4t+3``; the last is the interior one.
    """
    nv = mesh.n_vertices
    mid = 0.5 * (mesh.vertices[mesh.edges[:, 0]] + mesh.vertices[mesh.edges[:, 1]])
    vertices = np.vstack([mesh.vertices, mid])
    a, b, c = mesh.triangles.T
    # midpoints opposite each local vertex
    ma = nv + mesh.tri_edges[:, 0]  # on edge bc
    mb = nv + mesh.tri_edges[:, 1]  # on edge ca
    mc = nv + mesh.tri_edges[:, 2]  # on edge ab
    children = np.stack([
        np.stack([a, mc, mb], axis=1),
        np.stack([mc, b, ma], axis=1),
        np.stack([mb, ma, c], axis=1),
        np.stack([ma, mb, mc], axis=1),
    ], axis=1).reshape(-1, 3)
    parent = np.repeat(np.arange(mesh.n_triangles), 4)
    return Mesh.from_triangles(
        vertices, children,
        level=mesh.level + 1,
        base_level=mesh.base_level,
        ancestry=mesh.ancestry + (parent,),
        nominal_size=mesh.nominal_size / 2,
        coarse=mesh,
    )


def refine(mesh: Mesh, times: int) -> Mesh:
    for _ in range(times):
        mesh = refine_uniform(mesh)
    return mesh


def parent_map(mesh: Mesh) -> np.ndarray | None:
    """Triangle -> parent at the previous level, or ``None`` at the base level."""
    return mesh.ancestry[-1] if mesh.ancestry else None


def descends_from(fine: Mesh, coarse: Mesh) -> bool:
    """True if ``fine`` was obtained from ``coarse`` by zero or more refinements."""
    m = fine
    while m is not None:
        if m is coarse:
            return True
        m = m.coarse
    return False


def ancestor_at_level(mesh: Mesh, tri, level: int):
    """Index of the triangle at ``level`` containing ``tri`` (scalar or array)."""
    if level > mesh.level:
        raise AncestryError(f"level {level} is finer than the mesh ({mesh.level})")
    if level < mesh.base_level:
        raise AncestryError(
            f"no ancestry below level {mesh.base_level}; mesh was not refined from there")
    out = np.asarray(tri)
    for parents in reversed(mesh.ancestry[level - mesh.base_level:]):
        out = parents[out]
    return out if np.ndim(out) else int(out)
