"""Periodic criss-cross triangulations of the torus (0, L)^2.

The mesh is an n x n grid of squares, each split along the diagonal from its
lower-left to its upper-right corner.  Periodic images are folded onto one
representative, so the vertex set is the n x n grid and every geometric edge
is shared by exactly two triangles.

Numbering is structured so that every finite element operator assembled on
the mesh is block-circulant under grid translations:

* vertex ``(i, j)`` has index ``i + n*j`` (the "cell index" of its square),
* edges come in three families (horizontal, vertical, diagonal), numbered
  ``family*n**2 + cell``,
* P2 scalar dofs are the vertices followed by the edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = ["TorusMesh", "build_torus_mesh", "dof_counts", "fold"]


def fold(points: np.ndarray, L: float) -> np.ndarray:
    """Reduce coordinates modulo ``L`` into ``[0, L)``."""
    r = np.mod(np.asarray(points, dtype=float), L)
    # np.mod rounds tiny negatives up to exactly L
    return np.where(r >= L, r - L, r)


@dataclass(frozen=True, eq=False)
class TorusMesh:
    L: float
    n: int
    h: float
    vertices: np.ndarray  # (n^2, 2), representatives in [0, L)^2
    triangles: np.ndarray  # (2n^2, 3) vertex indices, counter-clockwise
    triangle_coords: np.ndarray  # (2n^2, 3, 2) unfolded corner coordinates
    triangle_edges: np.ndarray  # (2n^2, 3) edges (v0,v1), (v1,v2), (v2,v0)
    edge_vertices: np.ndarray  # (3n^2, 2) representative endpoints
    edge_midpoints: np.ndarray  # (3n^2, 2)
    p1_dof_of_vertex: np.ndarray
    p2_dof_of_vertex: np.ndarray
    p2_dof_of_edge: np.ndarray
    _p2_cells: np.ndarray = field(repr=False)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edge_midpoints.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    @property
    def p2_cells(self) -> np.ndarray:
        """(2n^2, 6) global P2 scalar dofs per triangle: 3 vertices then 3 edges."""
        return self._p2_cells

    @property
    def areas(self) -> np.ndarray:
        c = self.triangle_coords
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def to_dict(self) -> dict:
        p1, p2, vel = dof_counts(self)
        return {
            "L": self.L,
            "n": self.n,
            "h": self.h,
            "vertices": self.n_vertices,
            "edges": self.n_edges,
            "triangles": self.n_triangles,
            "p1_dofs": p1,
            "p2_scalar_dofs": p2,
            "velocity_dofs": vel,
        }


def _edge_key(mid: np.ndarray, n: int, L: float) -> tuple[int, int]:
    # midpoints sit on the half-grid; 2*mid/H is an integer pair mod 2n
    H = L / n
    kx, ky = np.rint(2.0 * np.asarray(mid) / H).astype(int) % (2 * n)
    return int(kx), int(ky)


def build_torus_mesh(L: float, n: int) -> TorusMesh:
    """Uniform criss-cross triangulation of the periodic square of side ``L``.

    Raises ``ValueError`` for ``L <= 0`` or ``n < 2``: with a single cell the
    periodic identification makes a vertex adjacent to itself and P2 edge
    dofs become ambiguous.
    """
    if not (L > 0 and math.isfinite(L)):
        raise ValueError(f"side length must be positive, got {L!r}")
    if int(n) != n or n < 2:
        raise ValueError(f"need an integer n >= 2 subdivisions, got {n!r}")
    n = int(n)
    L = float(L)
    H = L / n

    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="xy")
    ii = ii.ravel()
    jj = jj.ravel()
    vertices = np.column_stack([ii * H, jj * H])

    def vid(i, j):
        return (i % n) + n * (j % n)

    v00 = vid(ii, jj)
    v10 = vid(ii + 1, jj)
    v11 = vid(ii + 1, jj + 1)
    v01 = vid(ii, jj + 1)
    # two triangles per cell, interleaved: 2*cell (lower right), 2*cell+1
    tris = np.empty((2 * n * n, 3), dtype=np.int64)
    tris[0::2] = np.column_stack([v00, v10, v11])
    tris[1::2] = np.column_stack([v00, v11, v01])

    x0 = ii * H
    y0 = jj * H
    c00 = np.column_stack([x0, y0])
    c10 = np.column_stack([x0 + H, y0])
    c11 = np.column_stack([x0 + H, y0 + H])
    c01 = np.column_stack([x0, y0 + H])
    coords = np.empty((2 * n * n, 3, 2))
    coords[0::2] = np.stack([c00, c10, c11], axis=1)
    coords[1::2] = np.stack([c00, c11, c01], axis=1)

    # Identify edges by (unordered representative endpoints, folded midpoint).
    # The folded midpoint alone is unique for n >= 2; the endpoint pair is kept
    # in the key as a consistency check against mis-folding.
    edge_index: dict[tuple[int, int], int] = {}
    edge_pair: dict[tuple[int, int], tuple[int, int]] = {}
    tri_edges = np.empty((tris.shape[0], 3), dtype=np.int64)
    for t in range(tris.shape[0]):
        for a in range(3):
            b = (a + 1) % 3
            mid = fold(0.5 * (coords[t, a] + coords[t, b]), L)
            key = _edge_key(mid, n, L)
            pair = tuple(sorted((int(tris[t, a]), int(tris[t, b]))))
            if key in edge_index:
                if edge_pair[key] != pair:
                    raise RuntimeError(f"inconsistent periodic edge identification at {key}")
            else:
                kx, ky = key
                family = {(1, 0): 0, (0, 1): 1, (1, 1): 2}[(kx % 2, ky % 2)]
                c = (kx // 2) + n * (ky // 2)
                edge_index[key] = family * n * n + c
                edge_pair[key] = pair
            tri_edges[t, a] = edge_index[key]

    n_edges = len(edge_index)
    edge_vertices = np.empty((n_edges, 2), dtype=np.int64)
    edge_mid = np.empty((n_edges, 2))
    for key, e in edge_index.items():
        edge_vertices[e] = edge_pair[key]
        edge_mid[e] = (0.5 * H * key[0], 0.5 * H * key[1])

    p1_of_vertex = np.arange(n * n)
    p2_of_vertex = np.arange(n * n)
    p2_of_edge = n * n + np.arange(n_edges)
    p2_cells = np.hstack([tris, p2_of_edge[tri_edges]])

    return TorusMesh(
        L=L,
        n=n,
        h=L * math.sqrt(2.0) / n,
        vertices=vertices,
        triangles=tris,
        triangle_coords=coords,
        triangle_edges=tri_edges,
        edge_vertices=edge_vertices,
        edge_midpoints=edge_mid,
        p1_dof_of_vertex=p1_of_vertex,
        p2_dof_of_vertex=p2_of_vertex,
        p2_dof_of_edge=p2_of_edge,
        _p2_cells=p2_cells,
    )


def dof_counts(mesh: TorusMesh) -> tuple[int, int, int]:
    """(P1 count, scalar P2 count, vector P2 velocity count)."""
    p1 = mesh.n_vertices
    p2 = mesh.n_vertices + mesh.n_edges
    return p1, p2, 2 * p2
