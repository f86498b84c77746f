"""Uniform simplicial meshes of the unit interval and the unit square.

Meshes are built on a structured grid (each square split along the
diagonal from (x0, y0) to (x1, y1)), which lets us locate points in O(1)
and refine by rebuilding at twice the resolution.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np


@dataclass(frozen=True, eq=False)
class Mesh:
    dim: int
    nodes: np.ndarray  # (n_nodes, dim)
    elements: np.ndarray  # (n_elems, dim + 1)
    boundary_nodes: frozenset
    h: float
    cells_per_side: int
    volumes: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def interior_nodes(self) -> np.ndarray:
        mask = np.ones(self.n_nodes, dtype=bool)
        mask[list(self.boundary_nodes)] = False
        return np.flatnonzero(mask)

    def element_vertices(self, k: int) -> np.ndarray:
        return self.nodes[self.elements[k]]

    def locate(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Return (element index, barycentric coordinates) for each point in the closed domain."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[1] != self.dim:
            raise ValueError(f"points must have {self.dim} columns, got {pts.shape[1]}")
        n = self.cells_per_side
        cell = np.clip(np.floor(pts * n).astype(int), 0, n - 1)
        if self.dim == 1:
            elem = cell[:, 0]
        else:
            i, j = cell[:, 0], cell[:, 1]
            fx = pts[:, 0] * n - i
            fy = pts[:, 1] * n - j
            # lower triangle (below the diagonal) is 2*(j*n+i), upper is +1
            elem = 2 * (j * n + i) + (fy > fx).astype(int)
        return elem, self.barycentric(elem, pts)

    def barycentric(self, elem: np.ndarray, pts: np.ndarray) -> np.ndarray:
        verts = self.nodes[self.elements[elem]]  # (m, d+1, d)
        if self.dim == 1:
            x0, x1 = verts[:, 0, 0], verts[:, 1, 0]
            l1 = (pts[:, 0] - x0) / (x1 - x0)
            return np.stack([1.0 - l1, l1], axis=1)
        T = np.stack([verts[:, 1] - verts[:, 0], verts[:, 2] - verts[:, 0]], axis=2)
        lam12 = np.linalg.solve(T, (pts - verts[:, 0])[..., None])[..., 0]
        return np.column_stack([1.0 - lam12.sum(axis=1), lam12])

    def dump(self, path) -> None:
        """Plain-text dump: node count, node coordinates, element count, element node indices."""
        with open(path, "w") as fh:
            fh.write(f"{self.n_nodes}\n")
            for p in self.nodes:
                fh.write(" ".join(repr(float(c)) for c in p) + "\n")
            fh.write(f"{self.n_elements}\n")
            for e in self.elements:
                fh.write(" ".join(str(int(i)) for i in e) + "\n")


@dataclass(frozen=True, eq=False)
class SubSimplexSet:
    parent: int
    level: int
    cells: np.ndarray  # (2**(d*n), d+1, d) vertex coordinates


def simplex_volume(verts: np.ndarray) -> np.ndarray:
    """Volume of simplices given as (..., d+1, d) vertex arrays."""
    verts = np.asarray(verts, dtype=float)
    d = verts.shape[-1]
    edges = verts[..., 1:, :] - verts[..., :1, :]
    return np.abs(np.linalg.det(edges)) / factorial(d)


def simplex_diameter(verts: np.ndarray) -> np.ndarray:
    verts = np.asarray(verts, dtype=float)
    diff = verts[..., :, None, :] - verts[..., None, :, :]
    return np.sqrt((diff**2).sum(axis=-1)).max(axis=(-1, -2))


def build_uniform_mesh(dim: int, cells_per_side: int) -> Mesh:
    if dim not in (1, 2):
        raise ValueError(f"dim must be 1 or 2, got {dim}")
    if int(cells_per_side) != cells_per_side or cells_per_side < 1:
        raise ValueError(f"cells_per_side must be a positive integer, got {cells_per_side}")
    n = int(cells_per_side)
    if dim == 1:
        nodes = np.linspace(0.0, 1.0, n + 1)[:, None]
        elements = np.column_stack([np.arange(n), np.arange(1, n + 1)])
        boundary = frozenset({0, n})
    else:
        xs = np.linspace(0.0, 1.0, n + 1)
        X, Y = np.meshgrid(xs, xs)  # node id = j*(n+1) + i
        nodes = np.column_stack([X.ravel(), Y.ravel()])
        elems = []
        for j in range(n):
            for i in range(n):
                v00 = j * (n + 1) + i
                v10 = v00 + 1
                v01 = v00 + n + 1
                v11 = v01 + 1
                elems.append((v00, v10, v11))
                elems.append((v00, v11, v01))
        elements = np.array(elems, dtype=int)
        on_bdry = np.isclose(nodes, 0.0) | np.isclose(nodes, 1.0)
        boundary = frozenset(np.flatnonzero(on_bdry.any(axis=1)).tolist())
    elements = np.asarray(elements, dtype=int)
    verts = nodes[elements]
    volumes = simplex_volume(verts)
    h = float(simplex_diameter(verts).max())
    nodes.setflags(write=False)
    elements.setflags(write=False)
    volumes.setflags(write=False)
    return Mesh(dim, nodes, elements, boundary, h, n, volumes)


def refine(mesh: Mesh) -> Mesh:
    """Uniform refinement: bisection in 1D, red refinement in 2D.

    Red refinement of the diagonal-split grid reproduces the grid at twice the
    resolution, so the refined mesh is rebuilt directly.
    """
    return build_uniform_mesh(mesh.dim, 2 * mesh.cells_per_side)


def _red_split(tri: np.ndarray) -> np.ndarray:
    a, b, c = tri
    ab, bc, ca = (a + b) / 2, (b + c) / 2, (c + a) / 2
    return np.array([[a, ab, ca], [ab, b, bc], [ca, bc, c], [ab, bc, ca]])


def subdivide_simplex(verts: np.ndarray, n: int) -> np.ndarray:
    """Split a simplex into 2**(d*n) congruent sub-simplices of diameter diam/2**n."""
    if n < 0:
        raise ValueError(f"subdivision level must be >= 0, got {n}")
    verts = np.asarray(verts, dtype=float)
    d = verts.shape[1]
    if d == 1:
        t = np.linspace(0.0, 1.0, 2**n + 1)
        pts = verts[0] + t[:, None] * (verts[1] - verts[0])
        return np.stack([pts[:-1], pts[1:]], axis=1)
    cells = verts[None]
    for _ in range(n):
        cells = np.concatenate([_red_split(c) for c in cells])
    return cells


def subdivide_element(mesh: Mesh, element: int, n: int) -> SubSimplexSet:
    return SubSimplexSet(element, n, subdivide_simplex(mesh.element_vertices(element), n))


def reference_rule(dim: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Vertex rule on the level-n subdivision of the reference simplex.

    Returns barycentric coordinates (m, dim+1) of the distinct sub-simplex
    vertices and weights (m,) normalised to sum to 1 (scale by |K|).
    """
    ref = np.vstack([np.zeros(dim), np.eye(dim)])
    cells = subdivide_simplex(ref, n)
    pts = cells.reshape(-1, dim)
    w_cell = 1.0 / (cells.shape[0] * (dim + 1))
    keys = np.rint(pts * 2**n).astype(int)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    weights = np.bincount(inv.ravel(), minlength=len(uniq)) * w_cell
    x = uniq / 2**n
    bary = np.column_stack([1.0 - x.sum(axis=1), x])
    return bary, weights
