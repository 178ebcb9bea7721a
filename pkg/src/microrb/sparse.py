"""Compressed-row matrices, Krylov solves, Dirichlet elimination, mean removal.

Storage and the iterative methods are delegated to scipy.sparse behind the
interfaces used by the assembly and time-stepping layers; everything here is
64-bit floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


@dataclass
class SparseMatrix:
    """CSR sparse operator. `csr` holds the scipy matrix (canonical form)."""

    csr: sp.csr_matrix

    def __post_init__(self):
        self.csr = sp.csr_matrix(self.csr)
        self.csr.sum_duplicates()
        self.csr.sort_indices()

    @property
    def shape(self):
        return self.csr.shape

    @property
    def row_offsets(self) -> np.ndarray:
        return self.csr.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self.csr.indices

    @property
    def values(self) -> np.ndarray:
        return self.csr.data

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix(self.csr.T.tocsr())

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix(self.csr + other.csr)

    def __sub__(self, other: "SparseMatrix") -> "SparseMatrix":
        return SparseMatrix(self.csr - other.csr)

    def __mul__(self, scalar: float) -> "SparseMatrix":
        return SparseMatrix(self.csr * scalar)

    __rmul__ = __mul__


@dataclass
class SolverConfig:
    """Krylov method selection and stopping rule.

    method: "cg" | "bicgstab" | "gmres"; preconditioner: "none" | "jacobi"
    | "ilu0". Tolerance is relative to ||b||.
    """

    method: str = "cg"
    tol: float = 1e-10
    maxiter: int = 10000
    preconditioner: str = "jacobi"
    restart: int = 50  # gmres only

    def __post_init__(self):
        if not 0.0 < self.tol < 1.0:
            raise ValueError(f"tolerance must be in (0,1), got {self.tol}")
        if self.maxiter < 1:
            raise ValueError("maxiter must be >= 1")
        if self.method not in ("cg", "bicgstab", "gmres"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.preconditioner not in ("none", "jacobi", "ilu0"):
            raise ValueError(f"unknown preconditioner {self.preconditioner!r}")


@dataclass
class SolveResult:
    x: np.ndarray
    iterations: int
    residual: float  # relative, ||b - A x|| / ||b||
    converged: bool


def from_triplets(shape, triplets) -> SparseMatrix:
    """Build CSR from (row, col, value) triplets; duplicates are summed."""
    if triplets:
        rows, cols, vals = (np.asarray(a) for a in zip(*triplets))
    else:
        rows = cols = vals = np.empty(0)
    if len(rows) and (rows.min() < 0 or cols.min() < 0
                      or rows.max() >= shape[0] or cols.max() >= shape[1]):
        raise ValueError("triplet index out of range")
    coo = sp.coo_matrix((np.asarray(vals, dtype=float), (rows, cols)), shape=shape)
    return SparseMatrix(coo.tocsr())


def from_coo_arrays(shape, rows, cols, vals) -> SparseMatrix:
    """Array-form triplet constructor used by the vectorized assembly loops."""
    coo = sp.coo_matrix((vals, (rows, cols)), shape=shape)
    return SparseMatrix(coo.tocsr())


def spmv(a: SparseMatrix, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (a.shape[1],):
        raise ValueError(f"dimension mismatch: {a.shape} @ {x.shape}")
    return a.csr @ x


def _preconditioner(a: SparseMatrix, kind: str):
    if kind == "none":
        return None
    if kind == "jacobi":
        d = a.csr.diagonal().copy()
        d[d == 0.0] = 1.0
        inv = 1.0 / d
        return spla.LinearOperator(a.shape, matvec=lambda v: inv * v)
    ilu = spla.spilu(a.csr.tocsc())
    return spla.LinearOperator(a.shape, matvec=ilu.solve)


def solve(a: SparseMatrix, b: np.ndarray, cfg: SolverConfig | None = None,
          precond_op=None) -> SolveResult:
    """Iteratively solve A x = b to ||b - A x|| <= tol * ||b||.

    Never raises on stagnation: the result carries the achieved residual and
    a converged flag so callers can decide how to proceed. `precond_op`
    overrides the config preconditioner with a prebuilt operator (used to
    reuse a factorization of a matrix that does not change between solves).
    """
    cfg = cfg or SolverConfig()
    b = np.asarray(b, dtype=float)
    if a.shape[0] != a.shape[1] or b.shape != (a.shape[0],):
        raise ValueError(f"shape mismatch: A {a.shape}, b {b.shape}")
    m = precond_op if precond_op is not None else _preconditioner(a, cfg.preconditioner)
    return _run_krylov(a, b, cfg, m)


def solve_multi(a: SparseMatrix, bs, cfg: SolverConfig | None = None,
                precond_op=None) -> list[SolveResult]:
    """Solve one matrix against several right-hand sides, building the
    preconditioner only once."""
    cfg = cfg or SolverConfig()
    m = precond_op if precond_op is not None else _preconditioner(a, cfg.preconditioner)
    return [_run_krylov(a, np.asarray(b, dtype=float), cfg, m) for b in bs]


def _run_krylov(a: SparseMatrix, b: np.ndarray, cfg: SolverConfig, m) -> SolveResult:
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return SolveResult(np.zeros_like(b), 0, 0.0, True)

    count = {"n": 0}

    def cb(_):
        count["n"] += 1

    kwargs = dict(rtol=cfg.tol, atol=0.0, maxiter=cfg.maxiter, M=m, callback=cb)
    if cfg.method == "cg":
        x, _ = spla.cg(a.csr, b, **kwargs)
    elif cfg.method == "bicgstab":
        x, _ = spla.bicgstab(a.csr, b, **kwargs)
    else:
        x, _ = spla.gmres(a.csr, b, restart=cfg.restart,
                          callback_type="pr_norm", **kwargs)
    res = np.linalg.norm(b - a.csr @ x) / bnorm
    return SolveResult(x, count["n"], float(res), bool(res <= cfg.tol))


def build_preconditioner(a: SparseMatrix, kind: str):
    """Expose preconditioner construction for reuse across many solves."""
    return _preconditioner(a, kind)


def apply_dirichlet(a: SparseMatrix, b: np.ndarray, dofs, values):
    """Symmetric elimination of Dirichlet dofs.

    Constrained rows and columns are zeroed, the diagonal set to 1, and b
    lifted so the solution takes the prescribed values exactly. Symmetry of
    a symmetric A is preserved. Returns new (A, b).
    """
    dofs = np.asarray(dofs, dtype=np.int64)
    values = np.asarray(values, dtype=float)
    n = a.shape[0]
    if len(np.unique(dofs)) != len(dofs):
        raise ValueError("duplicate Dirichlet dofs")
    if len(dofs) and (dofs.min() < 0 or dofs.max() >= n):
        raise ValueError("Dirichlet dof out of range")

    lifted = np.zeros(n)
    lifted[dofs] = values
    keep = np.ones(n)
    keep[dofs] = 0.0

    b_new = keep * (np.asarray(b, dtype=float) - a.csr @ lifted)
    b_new[dofs] = values

    d_keep = sp.diags(keep)
    pinned = sp.diags(1.0 - keep)
    a_new = d_keep @ a.csr @ d_keep + pinned
    return SparseMatrix(a_new.tocsr()), b_new


def project_zero_mean(p, weights: np.ndarray):
    """Shift a Lagrange field by a constant so its weighted integral is zero.

    `weights` must be the pressure-mass row sums so that weights @ coeffs
    equals the integral of the field.
    """
    from .fem import FeFunction

    total = float(np.sum(weights))
    if abs(total) < 1e-300:
        raise ValueError("zero total weight")
    mean = float(weights @ p.coeffs) / total
    return FeFunction(p.space, p.coeffs - mean)
