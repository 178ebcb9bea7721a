"""Lagrange P1/P2 triangle elements: reference bases, quadrature, dof tables.

Reference triangle has vertices (0,0), (1,0), (0,1); a point is addressed by
barycentric coordinates (l0, l1, l2) with l0 = 1 - xi - eta, l1 = xi, l2 = eta.
P2 edge dofs sit on the local edges (0,1), (1,2), (2,0), in that order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import BOUNDARY_TAGS, Mesh

_GRAD_BARY = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # d l_i / d(xi,eta)
_LOCAL_EDGES = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class QuadratureRule:
    """Quadrature on the reference triangle: barycentric points and weights.

    Weights sum to the reference area 1/2; `degree` is the highest total
    polynomial degree integrated exactly.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int


def _dunavant6() -> QuadratureRule:
    # 12-point symmetric rule, exact to degree 6, all weights positive.
    pts, wts = [], []
    for a, b, w in [(0.873821971016996, 0.063089014491502, 0.050844906370207),
                    (0.501426509658179, 0.249286745170910, 0.116786275726379)]:
        pts += [(a, b, b), (b, a, b), (b, b, a)]
        wts += [w, w, w]
    a, b, c, w = (0.636502499121399, 0.310352451033785,
                  0.053145049844816, 0.082851075618374)
    pts += [(a, b, c), (a, c, b), (b, a, c), (b, c, a), (c, a, b), (c, b, a)]
    wts += [w] * 6
    return QuadratureRule(points=np.array(pts),
                          weights=0.5 * np.array(wts), degree=6)


_DEFAULT_RULE = _dunavant6()


def default_quadrature() -> QuadratureRule:
    """Symmetric 12-point rule, exact for polynomials of total degree <= 6."""
    return _DEFAULT_RULE


def shape_eval(kind: str, point) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate basis values and reference gradients at a barycentric point.

    Returns (values, grads) with grads taken w.r.t. reference coordinates
    (xi, eta). Rejects points that are not a valid barycentric triple.
    """
    lam = np.asarray(point, dtype=float)
    if lam.shape != (3,) or np.any(lam < -1e-12) or abs(lam.sum() - 1.0) > 1e-10:
        raise ValueError(f"invalid barycentric point {point!r}")
    if kind == "P1":
        return lam.copy(), _GRAD_BARY.copy()
    if kind == "P2":
        vals = np.empty(6)
        grads = np.empty((6, 2))
        for i in range(3):
            vals[i] = lam[i] * (2.0 * lam[i] - 1.0)
            grads[i] = (4.0 * lam[i] - 1.0) * _GRAD_BARY[i]
        for k, (a, b) in enumerate(_LOCAL_EDGES):
            vals[3 + k] = 4.0 * lam[a] * lam[b]
            grads[3 + k] = 4.0 * (lam[a] * _GRAD_BARY[b] + lam[b] * _GRAD_BARY[a])
        return vals, grads
    raise ValueError(f"unknown element kind {kind!r}")


def _shape_table(kind: str, rule: QuadratureRule):
    """Stack shape_eval over all quadrature points: (nq, nloc), (nq, nloc, 2)."""
    vals, grads = zip(*(shape_eval(kind, p) for p in rule.points))
    return np.array(vals), np.array(grads)


class FeSpace:
    """Continuous Lagrange space (P1 or P2, 1 or 2 components) on a mesh.

    Scalar dofs are numbered nodes first, then edge midpoints ordered by
    lexicographic (min, max) node pairs. For 2-vector spaces the global dof
    of (component c, scalar dof i) is c * n_scalar + i.

    Precomputes per-element geometry and basis tables at the default
    quadrature rule so assembly and error norms can run vectorized.
    """

    def __init__(self, mesh: Mesh, kind: str, components: int = 1):
        if kind not in ("P1", "P2"):
            raise ValueError(f"unknown element kind {kind!r}")
        if components not in (1, 2):
            raise ValueError("components must be 1 or 2")
        self.mesh = mesh
        self.kind = kind
        self.components = components

        nv = mesh.n_nodes
        if kind == "P1":
            self.cells = mesh.triangles.copy()
            self.dof_coords = mesh.nodes.copy()
        else:
            edge_ids: dict[tuple[int, int], int] = {}
            for tri in mesh.triangles:
                for a, b in _LOCAL_EDGES:
                    key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                    edge_ids.setdefault(key, -1)
            for rank, key in enumerate(sorted(edge_ids)):
                edge_ids[key] = nv + rank
            cells = np.empty((mesh.n_triangles, 6), dtype=np.int64)
            cells[:, :3] = mesh.triangles
            for e, tri in enumerate(mesh.triangles):
                for k, (a, b) in enumerate(_LOCAL_EDGES):
                    key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
                    cells[e, 3 + k] = edge_ids[key]
            self.cells = cells
            coords = np.empty((nv + len(edge_ids), 2))
            coords[:nv] = mesh.nodes
            for (a, b), gid in edge_ids.items():
                coords[gid] = 0.5 * (mesh.nodes[a] + mesh.nodes[b])
            self.dof_coords = coords

        self.n_scalar = self.dof_coords.shape[0]
        self.ndof = self.n_scalar * components

        self._build_geometry()
        self._build_boundary_lists()

    def _build_geometry(self):
        p = self.mesh.nodes[self.mesh.triangles]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
        det = jac[:, 0, 0] * jac[:, 1, 1] - jac[:, 0, 1] * jac[:, 1, 0]
        if np.any(det <= 0):
            raise ValueError("mesh contains non-CCW or degenerate triangles")
        inv = np.empty_like(jac)
        inv[:, 0, 0] = jac[:, 1, 1]
        inv[:, 0, 1] = -jac[:, 1, 0]
        inv[:, 1, 0] = -jac[:, 0, 1]
        inv[:, 1, 1] = jac[:, 0, 0]
        inv /= det[:, None, None]
        self.det_j = det
        self.inv_jt = inv  # inverse-transpose: grad_phys = inv_jt @ grad_ref

        rule = default_quadrature()
        self.rule = rule
        vals, gref = _shape_table(self.kind, rule)
        self.basis_vals = vals                              # (nq, nloc)
        # physical gradients per element/point/basis: (ne, nq, nloc, 2)
        self.basis_grads = np.einsum("eij,qlj->eqli", inv, gref, optimize=True)
        self.qweights = rule.weights[None, :] * det[:, None]   # (ne, nq)
        lam = rule.points
        verts = self.mesh.nodes[self.mesh.triangles]            # (ne, 3, 2)
        self.qpoints = np.einsum("qv,evi->eqi", lam, verts, optimize=True)     # (ne, nq, 2)

    def _build_boundary_lists(self):
        xmin, xmax, ymin, ymax = self.mesh.bounds
        x, y = self.dof_coords[:, 0], self.dof_coords[:, 1]
        scale = max(xmax - xmin, ymax - ymin)
        tol = 1e-12 * scale
        on = {
            "left": np.abs(x - xmin) <= tol,
            "right": np.abs(x - xmax) <= tol,
            "bottom": np.abs(y - ymin) <= tol,
            "top": np.abs(y - ymax) <= tol,
        }
        self.boundary_dofs = {}
        self.boundary_scalar_dofs = {}
        for tag in BOUNDARY_TAGS:
            ids = np.nonzero(on[tag])[0]
            self.boundary_scalar_dofs[tag] = ids
            if self.components == 2:
                ids = np.concatenate([ids, ids + self.n_scalar])
            self.boundary_dofs[tag] = ids

    def dof_component(self, gdof):
        return np.asarray(gdof) // self.n_scalar

    def dof_location(self, gdof):
        return self.dof_coords[np.asarray(gdof) % self.n_scalar]

    def zero_function(self) -> "FeFunction":
        return FeFunction(self, np.zeros(self.ndof))


@dataclass
class FeFunction:
    """Coefficient vector over a FeSpace."""

    space: FeSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(
                f"coefficient length {self.coeffs.shape} != dof count {self.space.ndof}")

    def copy(self) -> "FeFunction":
        return FeFunction(self.space, self.coeffs.copy())


def build_space(mesh: Mesh, kind: str, components: int = 1) -> FeSpace:
    """Build a continuous P1/P2 space with per-tag boundary dof lists."""
    return FeSpace(mesh, kind, components)


def interpolate(space: FeSpace, f, t: float = 0.0) -> FeFunction:
    """Nodal interpolation: coefficients are f evaluated at dof locations.

    Scalar fields map (x, y, t) -> value; 2-vector fields return a pair.
    """
    x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
    if space.components == 1:
        vals = np.broadcast_to(np.asarray(f(x, y, t), dtype=float), x.shape)
        return FeFunction(space, vals.copy())
    fx, fy = f(x, y, t)
    coeffs = np.concatenate([
        np.broadcast_to(np.asarray(fx, dtype=float), x.shape),
        np.broadcast_to(np.asarray(fy, dtype=float), x.shape),
    ])
    return FeFunction(space, coeffs.copy())


def eval_at_quadrature(fh: FeFunction, tri: int, rule: QuadratureRule):
    """Values and physical gradients of fh at one triangle's quadrature points.

    Scalar: values (nq,), grads (nq, 2). Vector: values (nq, 2),
    grads (nq, 2, 2) indexed [point, component, derivative].
    """
    sp = fh.space
    vals, gref = _shape_table(sp.kind, rule)
    gphys = np.einsum("ij,qlj->qli", sp.inv_jt[tri], gref)
    dofs = sp.cells[tri]
    if sp.components == 1:
        c = fh.coeffs[dofs]
        return vals @ c, np.einsum("qli,l->qi", gphys, c)
    out_v = np.empty((rule.points.shape[0], 2))
    out_g = np.empty((rule.points.shape[0], 2, 2))
    for comp in range(2):
        c = fh.coeffs[dofs + comp * sp.n_scalar]
        out_v[:, comp] = vals @ c
        out_g[:, comp, :] = np.einsum("qli,l->qi", gphys, c)
    return out_v, out_g


def eval_all_elements(fh: FeFunction):
    """Batched values/gradients on every element at the space's default rule.

    Scalar: values (ne, nq), grads (ne, nq, 2).
    Vector: values (ne, nq, 2), grads (ne, nq, 2, 2).
    """
    sp = fh.space
    if sp.components == 1:
        c = fh.coeffs[sp.cells]                          # (ne, nloc)
        vals = np.einsum("ql,el->eq", sp.basis_vals, c, optimize=True)
        grads = np.einsum("eqli,el->eqi", sp.basis_grads, c, optimize=True)
        return vals, grads
    ne, nq = sp.qweights.shape
    vals = np.empty((ne, nq, 2))
    grads = np.empty((ne, nq, 2, 2))
    for comp in range(2):
        c = fh.coeffs[sp.cells + comp * sp.n_scalar]
        vals[:, :, comp] = np.einsum("ql,el->eq", sp.basis_vals, c, optimize=True)
        grads[:, :, comp, :] = np.einsum("eqli,el->eqi", sp.basis_grads, c, optimize=True)
    return vals, grads
