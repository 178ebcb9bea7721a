"""Structured triangulations of axis-aligned rectangles with tagged boundaries.

Every rectangle cell is split along the bottom-left -> top-right diagonal,
so the triangulation is fully deterministic for a given (nx, ny, bounds).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BOUNDARY_TAGS = ("left", "right", "bottom", "top")


@dataclass(frozen=True)
class Mesh:
    """Immutable triangle mesh of a rectangle.

    nodes            : (n_nodes, 2) vertex coordinates
    triangles        : (n_tri, 3) vertex indices, counterclockwise
    boundary_facets  : list of ((i, j), tag) edges on the rectangle boundary
    nominal_h        : 1/n for an n x n grid (table-indexing convention)
    bounds           : (xmin, xmax, ymin, ymax)
    """

    nodes: np.ndarray
    triangles: np.ndarray
    boundary_facets: list = field(default_factory=list)
    nominal_h: float = 0.0
    bounds: tuple = (0.0, 1.0, 0.0, 1.0)

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def triangle_areas(self) -> np.ndarray:
        """Signed areas of all triangles (positive for CCW orientation)."""
        p = self.nodes[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])


def build_structured_rect(nx: int, ny: int,
                          bounds: tuple = (0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Triangulate [xmin,xmax] x [ymin,ymax] into 2*nx*ny triangles.

    Produces (nx+1)(ny+1) nodes and 2(nx+ny) tagged boundary facets.
    Raises ValueError for non-positive subdivisions or degenerate bounds.
    """
    if nx < 1 or ny < 1:
        raise ValueError(f"subdivisions must be >= 1, got nx={nx}, ny={ny}")
    xmin, xmax, ymin, ymax = bounds
    if not (xmax > xmin and ymax > ymin):
        raise ValueError(f"degenerate bounds {bounds}")

    xs = np.linspace(xmin, xmax, nx + 1)
    ys = np.linspace(ymin, ymax, ny + 1)
    xv, yv = np.meshgrid(xs, ys, indexing="ij")
    nodes = np.column_stack([xv.ravel(), yv.ravel()])

    def nid(i, j):
        return i * (ny + 1) + j

    tris = []
    for i in range(nx):
        for j in range(ny):
            n00 = nid(i, j)
            n10 = nid(i + 1, j)
            n01 = nid(i, j + 1)
            n11 = nid(i + 1, j + 1)
            # diagonal n00 -> n11, both triangles CCW
            tris.append((n00, n10, n11))
            tris.append((n00, n11, n01))
    triangles = np.asarray(tris, dtype=np.int64)

    facets = []
    for j in range(ny):
        facets.append(((nid(0, j), nid(0, j + 1)), "left"))
        facets.append(((nid(nx, j), nid(nx, j + 1)), "right"))
    for i in range(nx):
        facets.append(((nid(i, 0), nid(i + 1, 0)), "bottom"))
        facets.append(((nid(i, ny), nid(i + 1, ny)), "top"))

    return Mesh(nodes=nodes, triangles=triangles, boundary_facets=facets,
                nominal_h=1.0 / max(nx, ny), bounds=tuple(bounds))


def mesh_diameter(mesh: Mesh) -> float:
    """Largest element diameter, i.e. the longest triangle edge in the mesh."""
    p = mesh.nodes[mesh.triangles]
    e0 = np.linalg.norm(p[:, 1] - p[:, 0], axis=1)
    e1 = np.linalg.norm(p[:, 2] - p[:, 1], axis=1)
    e2 = np.linalg.norm(p[:, 0] - p[:, 2], axis=1)
    return float(np.max(np.column_stack([e0, e1, e2])))
