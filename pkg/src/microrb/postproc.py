"""Error norms against closed-form fields, convergence tables, and exports."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from .fem import FeFunction, eval_all_elements
from .mesh import Mesh


def _quad_points(space):
    return space.qpoints[:, :, 0], space.qpoints[:, :, 1]


def l2_error(fh: FeFunction, exact, t: float, mean_align: bool = False) -> float:
    """sqrt(integral (fh - exact)^2) with the assembly quadrature rule.

    With `mean_align` (pressure) both fields are shifted to zero mean over
    the domain before comparing, so the error is gauge-invariant.
    """
    space = fh.space
    x, y = _quad_points(space)
    vals, _ = eval_all_elements(fh)
    w = space.qweights
    if space.components == 1:
        ex = np.broadcast_to(np.asarray(exact(x, y, t), dtype=float), x.shape)
        diff = vals - ex
        if mean_align:
            area = w.sum()
            diff = diff - (w * diff).sum() / area
        return math.sqrt(float(np.sum(w * diff * diff)))
    ex0, ex1 = exact(x, y, t)
    d0 = vals[:, :, 0] - np.broadcast_to(np.asarray(ex0, dtype=float), x.shape)
    d1 = vals[:, :, 1] - np.broadcast_to(np.asarray(ex1, dtype=float), x.shape)
    return math.sqrt(float(np.sum(w * (d0 * d0 + d1 * d1))))


def h1_error(fh: FeFunction, exact_grad, t: float) -> float:
    """Gradient seminorm of the error, sqrt(integral |grad fh - grad exact|^2).

    `exact_grad` returns (d/dx, d/dy) for scalars and the 2x2 row-major
    Jacobian tuple for 2-vector fields.
    """
    space = fh.space
    x, y = _quad_points(space)
    _, grads = eval_all_elements(fh)
    w = space.qweights
    comps = exact_grad(x, y, t)
    if space.components == 1:
        gx = grads[:, :, 0] - np.broadcast_to(np.asarray(comps[0], dtype=float), x.shape)
        gy = grads[:, :, 1] - np.broadcast_to(np.asarray(comps[1], dtype=float), x.shape)
        return math.sqrt(float(np.sum(w * (gx * gx + gy * gy))))
    acc = 0.0
    for comp in range(2):
        for axis in range(2):
            d = grads[:, :, comp, axis] - np.broadcast_to(
                np.asarray(comps[2 * comp + axis], dtype=float), x.shape)
            acc += float(np.sum(w * d * d))
    return math.sqrt(acc)


@dataclass
class ConvergenceRow:
    """One mesh level of a refinement study (rates vs the previous level)."""

    one_over_h: int
    err_u_l2: float
    err_u_h1: float
    err_p_l2: float
    err_w_l2: float
    err_w_h1: float
    err_t_l2: float
    err_t_h1: float
    rate_u_l2: float = float("nan")
    rate_u_h1: float = float("nan")
    rate_p_l2: float = float("nan")
    rate_w_l2: float = float("nan")
    rate_w_h1: float = float("nan")
    rate_t_l2: float = float("nan")
    rate_t_h1: float = float("nan")


CSV_COLUMNS = tuple(f.name for f in dc_fields(ConvergenceRow))


def rates(rows: list[ConvergenceRow]) -> list[ConvergenceRow]:
    """Fill observed orders log(e_prev/e_cur)/log(h_prev/h_cur) from the
    second row on. Requires strictly increasing 1/h."""
    if len(rows) < 2:
        raise ValueError("need at least two rows to compute rates")
    for prev, cur in zip(rows, rows[1:]):
        if cur.one_over_h <= prev.one_over_h:
            raise ValueError("mesh resolutions must be strictly increasing")
        ratio = math.log(cur.one_over_h / prev.one_over_h)
        for name in ("u_l2", "u_h1", "p_l2", "w_l2", "w_h1", "t_l2", "t_h1"):
            e_prev = getattr(prev, f"err_{name}")
            e_cur = getattr(cur, f"err_{name}")
            if e_cur > 0 and e_prev > 0:
                setattr(cur, f"rate_{name}", math.log(e_prev / e_cur) / ratio)
            elif e_prev == e_cur:
                setattr(cur, f"rate_{name}", 0.0)
    return rows


def steady_state_residual(state) -> float:
    """||u^{n+1} - u^n||_0 / dt, the velocity-based steadiness monitor."""
    diff = FeFunction(state.u.space, state.u.coeffs - state.u_prev.coeffs)
    vals, _ = eval_all_elements(diff)
    w = state.u.space.qweights
    nrm = math.sqrt(float(np.sum(w * (vals[:, :, 0] ** 2 + vals[:, :, 1] ** 2))))
    return nrm / state.dt


def export_csv(rows, path, columns=None):
    """Write records (dataclasses or dicts) with full-precision floats."""
    if not rows:
        raise ValueError("nothing to export")
    first = rows[0]
    if columns is None:
        columns = (tuple(first.keys()) if isinstance(first, dict)
                   else tuple(f.name for f in dc_fields(first)))

    def get(row, name):
        return row[name] if isinstance(row, dict) else getattr(row, name)

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.17e}"
        return str(v)

    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(fmt(get(row, c)) for c in columns) + "\n")


def export_vtk(fields: dict, mesh: Mesh, path, title="microrb fields"):
    """Legacy ASCII unstructured-grid file with point data at mesh vertices.

    P2 fields are downsampled to their vertex coefficients (vertex dofs are
    numbered first, matching node ids). Scalar fields become SCALARS
    entries, 2-vector fields VECTORS with zero z-component.
    """
    nv = mesh.n_nodes
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for px, py in mesh.nodes:
            fh.write(f"{px:.12g} {py:.12g} 0.0\n")
        nt = mesh.n_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("5\n" * nt)
        fh.write(f"POINT_DATA {nv}\n")
        for name, f in fields.items():
            if f.space.components == 1:
                vals = f.coeffs[:nv]
                fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
                for v in vals:
                    fh.write(f"{v:.12g}\n")
            else:
                n = f.space.n_scalar
                vx, vy = f.coeffs[:nv], f.coeffs[n:n + nv]
                fh.write(f"VECTORS {name} double\n")
                for a, b in zip(vx, vy):
                    fh.write(f"{a:.12g} {b:.12g} 0.0\n")
