"""Concrete problem setups: the 2D accuracy test with a known solution, the
thermally coupled lid-driven cavity, and the passive-scalar stirring flow.

The accuracy test prescribes

    u     = (sin(2 pi x + t) sin(2 pi y + t), cos(2 pi x + t) cos(2 pi y + t))
    p     = sin(2 pi (x - y) + t)
    w     = sin(2 pi x + t) sin(2 pi y + t)
    theta = cos(2 pi x + t) cos(2 pi y + t)

on the unit square. u is divergence-free and p has zero mean. The forcing
closures below were generated by symbolic differentiation of the governing
equations and are frozen here; the strong-form residual test in the suite
re-derives all derivatives by high-order finite differences and guards
against transcription errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import assembly as asm
from .fem import FeFunction
from .scheme import (BoundaryConditions, FieldBc, PhysicalParams,
                     SolverFailure)
from .sparse import SolverConfig, SparseMatrix, solve

TWO_PI = 2.0 * math.pi


@dataclass
class ExactSolution:
    """Closed-form fields and gradients for error measurement."""

    u: callable
    grad_u: callable    # -> (du1/dx, du1/dy, du2/dx, du2/dy)
    p: callable
    w: callable
    grad_w: callable
    th: callable
    grad_th: callable


@dataclass
class PassiveScalarSpec:
    """Transported marker: initial profile depends on the mesh width h."""

    def initial(self, h: float):
        delta = 0.5 * h
        return lambda x, y, t: 0.5 * (1.0 - np.tanh(y / delta))


@dataclass
class ProblemSpec:
    """Everything the stepper needs to integrate one configuration."""

    name: str
    bounds: tuple
    params: PhysicalParams
    bcs: BoundaryConditions
    init_u: callable
    init_w: callable
    init_th: callable
    init_p: callable | None = None
    f_u: callable | None = None
    f_w: callable | None = None
    f_th: callable | None = None
    exact: ExactSolution | None = None
    passive: PassiveScalarSpec | None = None
    e_coupling: bool = True
    rayleigh: float | None = None


def _zero_scalar(x, y, t):
    return np.zeros_like(np.asarray(x, dtype=float))


def _zero_vector(x, y, t):
    z = np.zeros_like(np.asarray(x, dtype=float))
    return z, z.copy()


# -- accuracy test -----------------------------------------------------------

def _trig(x, y, t):
    s1 = np.sin(TWO_PI * x + t)
    c1 = np.cos(TWO_PI * x + t)
    s2 = np.sin(TWO_PI * y + t)
    c2 = np.cos(TWO_PI * y + t)
    return s1, c1, s2, c2


def exact_u(x, y, t):
    s1, c1, s2, c2 = _trig(x, y, t)
    return s1 * s2, c1 * c2


def exact_grad_u(x, y, t):
    s1, c1, s2, c2 = _trig(x, y, t)
    return (TWO_PI * c1 * s2, TWO_PI * s1 * c2,
            -TWO_PI * s1 * c2, -TWO_PI * c1 * s2)


def exact_p(x, y, t):
    return np.sin(TWO_PI * (x - y) + t)


def exact_w(x, y, t):
    s1, _, s2, _ = _trig(x, y, t)
    return s1 * s2


def exact_grad_w(x, y, t):
    s1, c1, s2, c2 = _trig(x, y, t)
    return TWO_PI * c1 * s2, TWO_PI * s1 * c2


def exact_th(x, y, t):
    _, c1, _, c2 = _trig(x, y, t)
    return c1 * c2


def exact_grad_th(x, y, t):
    s1, c1, s2, c2 = _trig(x, y, t)
    return -TWO_PI * s1 * c2, -TWO_PI * c1 * s2


def make_forcing(params: PhysicalParams):
    """Frozen momentum/angular/heat sources for the accuracy-test solution."""
    chi, mu = params.chi, params.mu
    ups, kap, zeta = params.upsilon, params.kappa, params.zeta
    pi = math.pi

    def f_u(x, y, t):
        s1, c1, s2, c2 = _trig(x, y, t)
        cp = np.cos(TWO_PI * (x - y) + t)
        f1 = (c1 * s2 + s1 * c2) + TWO_PI * s1 * c1 \
            + 8.0 * pi * pi * (chi + mu) * s1 * s2 + TWO_PI * cp \
            - 2.0 * TWO_PI * chi * s1 * c2
        f2 = -(s1 * c2 + c1 * s2) - TWO_PI * s2 * c2 \
            + 8.0 * pi * pi * (chi + mu) * c1 * c2 - TWO_PI * cp \
            + 2.0 * TWO_PI * chi * c1 * s2 - c1 * c2
        return f1, f2

    def f_w(x, y, t):
        s1, c1, s2, c2 = _trig(x, y, t)
        return zeta * (c1 * s2 + s1 * c2) + TWO_PI * zeta * s1 * c1 \
            + 8.0 * pi * pi * ups * s1 * s2 + 4.0 * chi * s1 * s2 \
            + 4.0 * TWO_PI * chi * s1 * c2

    def f_th(x, y, t):
        s1, c1, s2, c2 = _trig(x, y, t)
        return -(s1 * c2 + c1 * s2) - TWO_PI * s2 * c2 \
            + 8.0 * pi * pi * kap * c1 * c2 - c1 * c2

    return f_u, f_w, f_th


def manufactured_2d(params: PhysicalParams | None = None) -> ProblemSpec:
    """Unit-square accuracy test: Dirichlet data from the exact solution on
    all boundaries for u, w, theta; pressure natural with zero mean."""
    params = params or PhysicalParams(chi=0.1, mu=1.0, upsilon=0.1, kappa=0.1)
    f_u, f_w, f_th = make_forcing(params)
    bcs = BoundaryConditions(
        u=FieldBc({tag: exact_u for tag in ("left", "right", "bottom", "top")}),
        w=FieldBc({tag: exact_w for tag in ("left", "right", "bottom", "top")}),
        theta=FieldBc({tag: exact_th for tag in ("left", "right", "bottom", "top")}),
    )
    exact = ExactSolution(u=exact_u, grad_u=exact_grad_u, p=exact_p,
                          w=exact_w, grad_w=exact_grad_w,
                          th=exact_th, grad_th=exact_grad_th)
    return ProblemSpec(
        name="manufactured", bounds=(0.0, 1.0, 0.0, 1.0), params=params,
        bcs=bcs, init_u=exact_u, init_w=exact_w, init_th=exact_th,
        init_p=exact_p, f_u=f_u, f_w=f_w, f_th=f_th, exact=exact)


# -- driven cavity -----------------------------------------------------------

def cavity_2d(chi: float = 0.1, mu: float = 0.1, kappa: float = 0.01,
              upsilon: float = 1.0, lid_corners: bool = True) -> ProblemSpec:
    """Thermally coupled lid-driven cavity on the unit square.

    Lid velocity (1,0) on top, no-slip elsewhere; w = 0 on the whole
    boundary; theta = 0 left / 1 right with insulated top and bottom. With
    `lid_corners` the two top corners take the lid value (the tag order puts
    the top last); otherwise the side walls win there.
    """
    for name, v in (("chi", chi), ("mu", mu), ("kappa", kappa), ("upsilon", upsilon)):
        if v <= 0:
            raise ValueError(f"{name} must be positive")
    params = PhysicalParams(chi=chi, mu=mu, upsilon=upsilon, kappa=kappa)

    def lid(x, y, t):
        return np.ones_like(x), np.zeros_like(x)

    walls = {"top": lid, "left": _zero_vector, "right": _zero_vector,
             "bottom": _zero_vector}
    if lid_corners:
        u_bc = FieldBc(walls, tag_order=("left", "right", "bottom", "top"))
    else:
        u_bc = FieldBc(walls)
    bcs = BoundaryConditions(
        u=u_bc,
        w=FieldBc({tag: _zero_scalar for tag in ("left", "right", "bottom", "top")}),
        theta=FieldBc({"left": _zero_scalar,
                       "right": lambda x, y, t: np.ones_like(x)}),
    )
    return ProblemSpec(
        name="cavity", bounds=(0.0, 1.0, 0.0, 1.0), params=params, bcs=bcs,
        init_u=_zero_vector, init_w=_zero_scalar, init_th=_zero_scalar,
        rayleigh=1.0 / ((chi + mu) * kappa))


# -- passive-scalar stirring --------------------------------------------------

def stirring_2d() -> ProblemSpec:
    """Torque-driven stirring on (-1,1)^2 with a transported marker field.

    The angular equation carries the applied torque 25(x - 1); velocity and
    angular velocity are homogeneous Dirichlet, temperature insulated.
    """
    params = PhysicalParams(chi=0.1, mu=0.1, upsilon=2.0, kappa=1.0)

    def torque(x, y, t):
        return 25.0 * (x - 1.0)

    bcs = BoundaryConditions(
        u=FieldBc({tag: _zero_vector for tag in ("left", "right", "bottom", "top")}),
        w=FieldBc({tag: _zero_scalar for tag in ("left", "right", "bottom", "top")}),
        theta=FieldBc({}),
    )
    return ProblemSpec(
        name="stirring", bounds=(-1.0, 1.0, -1.0, 1.0), params=params,
        bcs=bcs, init_u=_zero_vector, init_w=_zero_scalar,
        init_th=_zero_scalar, f_w=torque, passive=PassiveScalarSpec())


# -- passive scalar stepping ---------------------------------------------------

@dataclass
class PassiveScalarState:
    """phi at the two most recent time levels (clamped to [0,1])."""

    phi_prev: FeFunction
    phi: FeFunction


def clamp_unit(coeffs: np.ndarray) -> np.ndarray:
    return np.clip(coeffs, 0.0, 1.0)


def step_scalar(state: PassiveScalarState, wind: FeFunction, dt: float,
                mass: SparseMatrix | None = None,
                conv: SparseMatrix | None = None,
                cfg: SolverConfig | None = None,
                startup: bool = False) -> PassiveScalarState:
    """BDF2 Galerkin transport of phi by `wind`, then clamp to [0,1].

    No diffusion and no boundary conditions: the operator is the mass term
    plus the antisymmetric convection, hence nonsingular. `startup` switches
    to the backward-Euler variant used for the very first step.
    """
    space = state.phi.space
    mass = mass or asm.mass_matrix(space)
    conv = conv if conv is not None else asm.convection_matrix(space, wind)
    cfg = cfg or SolverConfig(method="bicgstab", preconditioner="jacobi")

    if startup:
        a = SparseMatrix(((1.0 / dt) * mass.csr + conv.csr).tocsr())
        b = (1.0 / dt) * (mass.csr @ state.phi.coeffs)
    else:
        a = SparseMatrix((1.5 / dt * mass.csr + conv.csr).tocsr())
        b = (mass.csr @ (4.0 * state.phi.coeffs - state.phi_prev.coeffs)) / (2.0 * dt)
    res = solve(a, b, cfg)
    if not res.converged:
        raise SolverFailure("passive_scalar", res)
    phi_new = FeFunction(space, clamp_unit(res.x))
    return PassiveScalarState(phi_prev=state.phi, phi=phi_new)
