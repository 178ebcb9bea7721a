"""Element-loop assembly of the mass/stiffness/convection operators and of
every right-hand-side functional used by the time stepper.

All forms are integrated with the shared degree-6 rule, which is exact for
each integrand arising from P2 x P2 x grad(P2) products, and accumulated with
deterministic scatter so repeated assembly is bit-identical.

2D curl conventions: for scalar w, curl w = (dw/dy, -dw/dx); for a 2-vector
u, curl u = du2/dx - du1/dy. The pair satisfies (curl w, v) = (w, curl v)
for v vanishing on the boundary.
"""

from __future__ import annotations

import numpy as np

from .fem import FeFunction, FeSpace, eval_all_elements
from .sparse import SparseMatrix, from_coo_arrays


def _einsum(subscripts, *operands):
    # optimized contraction paths let the heavy assembly loops hit BLAS
    return np.einsum(subscripts, *operands, optimize=True)


def _check_same_mesh(a: FeSpace, b: FeSpace):
    if a.mesh is not b.mesh:
        raise ValueError("fields live on different meshes")


def _matrix_from_element_blocks(space: FeSpace, elem: np.ndarray) -> SparseMatrix:
    """Assemble (ne, nloc, nloc) element blocks into a global scalar-block CSR.

    For 2-component spaces the scalar operator is placed on both diagonal
    blocks (every operator assembled here acts componentwise).
    """
    cells = space.cells
    ne, nl = cells.shape
    rows = np.broadcast_to(cells[:, :, None], (ne, nl, nl)).ravel()
    cols = np.broadcast_to(cells[:, None, :], (ne, nl, nl)).ravel()
    vals = elem.ravel()
    if space.components == 1:
        return from_coo_arrays((space.ndof, space.ndof), rows, cols, vals)
    off = space.n_scalar
    rows = np.concatenate([rows, rows + off])
    cols = np.concatenate([cols, cols + off])
    vals = np.concatenate([vals, vals])
    return from_coo_arrays((space.ndof, space.ndof), rows, cols, vals)


def _scatter_rhs(space: FeSpace, elem: np.ndarray, component: int = 0) -> np.ndarray:
    """Add (ne, nloc) element contributions into a global vector."""
    out = np.zeros(space.ndof)
    np.add.at(out, space.cells + component * space.n_scalar, elem)
    return out


def integrate_scalar_field(space: FeSpace, qvals: np.ndarray) -> np.ndarray:
    """Integrate pointwise quadrature data (ne, nq) against every basis
    function of a scalar space."""
    elem = _einsum("eq,eq,ql->el", space.qweights, qvals, space.basis_vals)
    return _scatter_rhs(space, elem)


def _symmetrize(elem: np.ndarray) -> np.ndarray:
    # contraction order differs per output slot, so enforce the element-block
    # symmetry down to the last bit
    return 0.5 * (elem + elem.swapaxes(1, 2))


def mass_matrix(space: FeSpace) -> SparseMatrix:
    """(u, v): symmetric positive definite; row sums integrate the basis."""
    elem = _einsum("eq,ql,qm->elm", space.qweights,
                     space.basis_vals, space.basis_vals)
    return _matrix_from_element_blocks(space, _symmetrize(elem))


def stiffness_matrix(space: FeSpace, coeff: float = 1.0) -> SparseMatrix:
    """coeff * (grad u, grad v): symmetric, constants in the kernel."""
    if coeff <= 0:
        raise ValueError(f"stiffness coefficient must be > 0, got {coeff}")
    elem = coeff * _einsum("eq,eqli,eqmi->elm", space.qweights,
                             space.basis_grads, space.basis_grads)
    return _matrix_from_element_blocks(space, _symmetrize(elem))


def convection_matrix(space: FeSpace, wind: FeFunction) -> SparseMatrix:
    """Skew form of transport by `wind`: C = (C1 - C1^T)/2 with
    (C1)_ij = ((wind . grad) phi_j, phi_i), hence exactly antisymmetric."""
    _check_same_mesh(space, wind.space)
    if wind.space.components != 2:
        raise ValueError("wind must be a 2-vector field")
    wvals, _ = eval_all_elements(wind)                        # (ne, nq, 2)
    wdotg = _einsum("eqi,eqmi->eqm", wvals, space.basis_grads)
    elem = _einsum("eq,eqm,ql->elm", space.qweights, wdotg, space.basis_vals)
    c1 = _matrix_from_element_blocks(space, elem)
    return SparseMatrix(0.5 * (c1.csr - c1.csr.T).tocsr())


def curl_scalar_to_vector_rhs(vspace: FeSpace, w: FeFunction,
                              factor: float = 1.0) -> np.ndarray:
    """Entries integral of factor * (dw/dy, -dw/dx) . phi_i."""
    _check_same_mesh(vspace, w.space)
    if vspace.components != 2 or w.space.components != 1:
        raise ValueError("expected scalar source and 2-vector target")
    _, gw = eval_all_elements(w)                              # (ne, nq, 2)
    e0 = _einsum("eq,eq,ql->el", vspace.qweights, factor * gw[:, :, 1],
                   vspace.basis_vals)
    e1 = _einsum("eq,eq,ql->el", vspace.qweights, -factor * gw[:, :, 0],
                   vspace.basis_vals)
    return _scatter_rhs(vspace, e0, 0) + _scatter_rhs(vspace, e1, 1)


def curl_vector_to_scalar_rhs(wspace: FeSpace, u: FeFunction,
                              factor: float = 1.0) -> np.ndarray:
    """Entries integral of factor * (du2/dx - du1/dy) * lambda_i."""
    _check_same_mesh(wspace, u.space)
    if wspace.components != 1 or u.space.components != 2:
        raise ValueError("expected 2-vector source and scalar target")
    _, gu = eval_all_elements(u)                              # (ne, nq, 2, 2)
    curl = gu[:, :, 1, 0] - gu[:, :, 0, 1]
    return integrate_scalar_field(wspace, factor * curl)


def grad_pressure_rhs(vspace: FeSpace, p: FeFunction) -> np.ndarray:
    """Entries integral of grad(p) . phi_i."""
    _check_same_mesh(vspace, p.space)
    _, gp = eval_all_elements(p)                              # (ne, nq, 2)
    out = np.zeros(vspace.ndof)
    for comp in range(2):
        elem = _einsum("eq,eq,ql->el", vspace.qweights, gp[:, :, comp],
                         vspace.basis_vals)
        out += _scatter_rhs(vspace, elem, comp)
    return out


def div_velocity_rhs(pspace: FeSpace, u: FeFunction) -> np.ndarray:
    """Entries integral of div(u) * q_i (caller applies any scalar factor)."""
    _check_same_mesh(pspace, u.space)
    if u.space.components != 2:
        raise ValueError("u must be a 2-vector field")
    _, gu = eval_all_elements(u)
    div = gu[:, :, 0, 0] + gu[:, :, 1, 1]
    elem = _einsum("eq,eq,ql->el", pspace.qweights, div, pspace.basis_vals)
    return _scatter_rhs(pspace, elem)


def buoyancy_rhs(vspace: FeSpace, theta: FeFunction, e) -> np.ndarray:
    """Entries integral of theta * e . phi_i for a fixed unit direction e."""
    _check_same_mesh(vspace, theta.space)
    tvals, _ = eval_all_elements(theta)                       # (ne, nq)
    out = np.zeros(vspace.ndof)
    for comp in range(2):
        if e[comp] == 0.0:
            continue
        elem = _einsum("eq,eq,ql->el", vspace.qweights, e[comp] * tvals,
                         vspace.basis_vals)
        out += _scatter_rhs(vspace, elem, comp)
    return out


def velocity_dot_e_rhs(tspace: FeSpace, u: FeFunction, e) -> np.ndarray:
    """Entries integral of (u . e) * psi_i."""
    _check_same_mesh(tspace, u.space)
    uvals, _ = eval_all_elements(u)                           # (ne, nq, 2)
    return integrate_scalar_field(
        tspace, uvals[:, :, 0] * e[0] + uvals[:, :, 1] * e[1])


def source_rhs(space: FeSpace, f, t: float = 0.0) -> np.ndarray:
    """Quadrature of an analytic source against every basis function.

    Scalar spaces take f(x, y, t) -> values; 2-vector spaces take f returning
    a component pair.
    """
    x = space.qpoints[:, :, 0]
    y = space.qpoints[:, :, 1]
    if space.components == 1:
        vals = np.broadcast_to(np.asarray(f(x, y, t), dtype=float), x.shape)
        elem = _einsum("eq,eq,ql->el", space.qweights, vals, space.basis_vals)
        return _scatter_rhs(space, elem)
    fx, fy = f(x, y, t)
    out = np.zeros(space.ndof)
    for comp, fv in enumerate((fx, fy)):
        vals = np.broadcast_to(np.asarray(fv, dtype=float), x.shape)
        elem = _einsum("eq,eq,ql->el", space.qweights, vals, space.basis_vals)
        out += _scatter_rhs(space, elem, comp)
    return out


def mass_action(m: SparseMatrix, fh: FeFunction) -> np.ndarray:
    return m.csr @ fh.coeffs


def mass_action_vector(ms: SparseMatrix, fh: FeFunction) -> np.ndarray:
    """Apply a scalar mass matrix componentwise to a 2-vector field."""
    n = fh.space.n_scalar
    return np.concatenate([ms.csr @ fh.coeffs[:n], ms.csr @ fh.coeffs[n:]])


class OperatorPattern:
    """Shared CSR pattern of all element-dense operators on one scalar space.

    Every operator assembled from full (nloc x nloc) element blocks has the
    same canonical sparsity, so a time loop can rebuild wind-dependent
    matrices by pure data-array arithmetic: one fixed scatter map from
    element blocks to CSR data positions, plus a permutation that realizes
    the transpose for the skew-symmetrization of convection.
    """

    def __init__(self, space: FeSpace):
        if space.components != 1:
            raise ValueError("pattern cache operates on scalar spaces")
        self.space = space
        cells = space.cells
        ne, nl = cells.shape
        rows = np.broadcast_to(cells[:, :, None], (ne, nl, nl)).ravel()
        cols = np.broadcast_to(cells[:, None, :], (ne, nl, nl)).ravel()
        order = np.lexsort((cols, rows))
        rs, cs = rows[order], cols[order]
        first = np.ones(len(rs), dtype=bool)
        first[1:] = (rs[1:] != rs[:-1]) | (cs[1:] != cs[:-1])
        self._order = order
        self._starts = np.nonzero(first)[0]
        self.indices = cs[first]
        urows = rs[first]
        n = space.ndof
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, urows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        nnz = len(self.indices)
        # data permutation realizing the transpose on the symmetric pattern
        pos = np.lexsort((urows, self.indices))
        self._tperm = pos
        self._diag_pos = self._locate_diagonal(urows)
        self._row_of = urows

    def _locate_diagonal(self, urows):
        diag = np.where(self.indices == urows)[0]
        if len(diag) != self.space.ndof:
            raise RuntimeError("pattern misses diagonal entries")
        return diag

    def assemble(self, elem: np.ndarray) -> np.ndarray:
        """Reduce (ne, nloc, nloc) element blocks to the CSR data array."""
        return np.add.reduceat(elem.ravel()[self._order], self._starts)

    def matrix(self, data: np.ndarray) -> SparseMatrix:
        import scipy.sparse as scisp
        n = self.space.ndof
        return SparseMatrix(scisp.csr_matrix((data, self.indices, self.indptr),
                                             shape=(n, n)))

    def convection_data(self, wind_vals: np.ndarray) -> np.ndarray:
        """Skew convection data for wind values (ne, nq, 2) at quadrature."""
        space = self.space
        wdotg = _einsum("eqi,eqmi->eqm", wind_vals, space.basis_grads)
        elem = _einsum("eq,eqm,ql->elm", space.qweights, wdotg,
                         space.basis_vals)
        c1 = self.assemble(elem)
        return 0.5 * (c1 - c1[self._tperm])

    def dirichlet_mask(self, dofs: np.ndarray):
        """Precompute the symmetric-elimination data mask for a fixed dof set.

        Returns (mask, diag_positions) so that
        data_elim = data * mask; data_elim[diag_positions] = 1.0
        matches apply_dirichlet's matrix exactly.
        """
        keep = np.ones(self.space.ndof)
        keep[dofs] = 0.0
        mask = keep[self._row_of] * keep[self.indices]
        return mask, self._diag_pos[np.asarray(dofs, dtype=np.int64)]


def l2_norm_sq(m: SparseMatrix, coeffs: np.ndarray) -> float:
    """c^T M c for a mass (or stiffness) matrix M."""
    return float(coeffs @ (m.csr @ coeffs))
