import math

import numpy as np
import pytest

from microrb import assembly as asm
from microrb.fem import FeFunction, build_space, interpolate
from microrb.mesh import build_structured_rect
from microrb.problems import (PassiveScalarState, cavity_2d, clamp_unit,
                              exact_grad_th, exact_grad_u, exact_grad_w,
                              exact_p, exact_th, exact_u, exact_w,
                              make_forcing, manufactured_2d, step_scalar,
                              stirring_2d)
from microrb.scheme import PhysicalParams


def sympy_residual_oracle():
    """Independent symbolic build of the governing equations; returns
    callables for the three strong-form residuals with the frozen forcing
    subtracted."""
    import sympy as sp

    x, y, t = sp.symbols("x y t", real=True)
    chi, mu, ups, kap, zeta = 0.3, 0.7, 0.2, 0.05, 1.4  # arbitrary positives
    params = PhysicalParams(chi=chi, mu=mu, upsilon=ups, kappa=kap, zeta=zeta)

    u1 = sp.sin(2 * sp.pi * x + t) * sp.sin(2 * sp.pi * y + t)
    u2 = sp.cos(2 * sp.pi * x + t) * sp.cos(2 * sp.pi * y + t)
    p = sp.sin(2 * sp.pi * (x - y) + t)
    w = sp.sin(2 * sp.pi * x + t) * sp.sin(2 * sp.pi * y + t)
    th = sp.cos(2 * sp.pi * x + t) * sp.cos(2 * sp.pi * y + t)

    lap = lambda f: sp.diff(f, x, 2) + sp.diff(f, y, 2)
    adv = lambda f: u1 * sp.diff(f, x) + u2 * sp.diff(f, y)

    r_u1 = sp.diff(u1, t) + adv(u1) - (chi + mu) * lap(u1) + sp.diff(p, x) \
        - 2 * chi * sp.diff(w, y)
    r_u2 = sp.diff(u2, t) + adv(u2) - (chi + mu) * lap(u2) + sp.diff(p, y) \
        + 2 * chi * sp.diff(w, x) - th
    r_w = zeta * sp.diff(w, t) + zeta * adv(w) - ups * lap(w) + 4 * chi * w \
        - 2 * chi * (sp.diff(u2, x) - sp.diff(u1, y))
    r_th = sp.diff(th, t) + adv(th) - kap * lap(th) - u2

    fns = [sp.lambdify((x, y, t), expr, "numpy")
           for expr in (r_u1, r_u2, r_w, r_th)]
    return params, fns


def test_manufactured_forcing_matches_symbolic_oracle():
    params, (r_u1, r_u2, r_w, r_th) = sympy_residual_oracle()
    f_u, f_w, f_th = make_forcing(params)
    rng = np.random.default_rng(42)
    x, y, t = rng.random(100), rng.random(100), rng.random(100) * 2.0
    fu1, fu2 = f_u(x, y, t)
    scale = max(np.abs(fu1).max(), np.abs(fu2).max(), 1.0)
    assert np.abs(r_u1(x, y, t) - fu1).max() <= 1e-10 * scale
    assert np.abs(r_u2(x, y, t) - fu2).max() <= 1e-10 * scale
    assert np.abs(r_w(x, y, t) - f_w(x, y, t)).max() <= 1e-10 * scale
    assert np.abs(r_th(x, y, t) - f_th(x, y, t)).max() <= 1e-10 * scale


def test_exact_velocity_divergence_free_pointwise():
    rng = np.random.default_rng(0)
    x, y, t = rng.random(100), rng.random(100), rng.random(100) * 3
    dux, _, _, dvy = exact_grad_u(x, y, t)
    assert np.abs(dux + dvy).max() < 1e-12


def test_exact_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    x, y, t = rng.random(20) * 0.8 + 0.1, rng.random(20) * 0.8 + 0.1, rng.random(20)
    h = 1e-6
    for f, grad in ((exact_w, exact_grad_w), (exact_th, exact_grad_th)):
        gx, gy = grad(x, y, t)
        fd_x = (f(x + h, y, t) - f(x - h, y, t)) / (2 * h)
        fd_y = (f(x, y + h, t) - f(x, y - h, t)) / (2 * h)
        assert np.abs(gx - fd_x).max() < 1e-8
        assert np.abs(gy - fd_y).max() < 1e-8
    u1x, u1y, u2x, u2y = exact_grad_u(x, y, t)
    fd = (exact_u(x + h, y, t)[0] - exact_u(x - h, y, t)[0]) / (2 * h)
    assert np.abs(u1x - fd).max() < 1e-8
    fd = (exact_u(x, y + h, t)[1] - exact_u(x, y - h, t)[1]) / (2 * h)
    assert np.abs(u2y - fd).max() < 1e-8


def test_exact_pressure_has_zero_mean():
    mesh = build_structured_rect(16, 16)
    sp2 = build_space(mesh, "P2", 1)
    for t in (0.0, 0.37, 1.0):
        vals = exact_p(sp2.qpoints[:, :, 0], sp2.qpoints[:, :, 1], t)
        assert abs(float(np.sum(sp2.qweights * vals))) < 1e-12


def test_manufactured_problem_wiring():
    prob = manufactured_2d()
    assert prob.exact is not None and prob.f_u is not None
    assert prob.bounds == (0.0, 1.0, 0.0, 1.0)
    x = np.array([0.25])
    fx, fy = prob.init_u(x, x, 0.0)
    ex_fx, ex_fy = exact_u(x, x, 0.0)
    assert fx == pytest.approx(ex_fx) and fy == pytest.approx(ex_fy)


def test_cavity_rayleigh_numbers():
    assert cavity_2d(chi=0.1, mu=0.1, kappa=0.01).rayleigh == pytest.approx(500.0)
    assert cavity_2d(chi=0.0001, mu=0.0001,
                     kappa=0.01).rayleigh == pytest.approx(500000.0)


def test_cavity_zero_initial_energy():
    prob = cavity_2d()
    x = np.linspace(0, 1, 5)
    ux, uy = prob.init_u(x, x, 0.0)
    assert np.all(ux == 0.0) and np.all(uy == 0.0)
    assert np.all(prob.init_w(x, x, 0.0) == 0.0)
    assert np.all(prob.init_th(x, x, 0.0) == 0.0)


def test_cavity_rejects_bad_params():
    with pytest.raises(ValueError):
        cavity_2d(chi=-0.1)


def test_cavity_boundary_values():
    prob = cavity_2d()
    x = np.array([0.5])
    lid = prob.bcs.u.dirichlet["top"]
    assert lid(x, x, 0.0)[0] == pytest.approx(1.0)
    right = prob.bcs.theta.dirichlet["right"]
    left = prob.bcs.theta.dirichlet["left"]
    assert right(x, x, 0.0) == pytest.approx(1.0)
    assert left(x, x, 0.0) == pytest.approx(0.0)
    assert prob.bcs.theta.dirichlet["top"] is None  # insulated
    # lid wins the top corners: top is applied last for the velocity
    assert prob.bcs.u.tag_order[-1] == "top"


def test_stirring_spec_values():
    prob = stirring_2d()
    assert prob.bounds == (-1.0, 1.0, -1.0, 1.0)
    pr = prob.params
    assert (pr.upsilon, pr.chi, pr.kappa, pr.mu) == (2.0, 0.1, 1.0, 0.1)
    x = np.array([1.0, -1.0])
    torque = prob.f_w(x, x, 0.0)
    assert torque[0] == pytest.approx(0.0)
    assert torque[1] == pytest.approx(-50.0)

    phi0 = prob.passive.initial(1.0 / 32.0)
    assert phi0(np.array([0.0]), np.array([0.0]), 0.0)[0] == pytest.approx(0.5)
    top = phi0(np.array([0.0]), np.array([1.0]), 0.0)[0]
    assert abs(top) < 1e-15
    phi0_fine = prob.passive.initial(1.0 / 64.0)
    assert abs(phi0_fine(np.array([0.0]), np.array([1.0]), 0.0)[0]) < 1e-15


def test_clamp_values():
    out = clamp_unit(np.array([-0.2, 1.3, 0.5]))
    assert np.allclose(out, [0.0, 1.0, 0.5])


def test_step_scalar_zero_wind_keeps_profile():
    mesh = build_structured_rect(6, 6)
    ssp = build_space(mesh, "P2", 1)
    vsp = build_space(mesh, "P2", 2)
    phi = interpolate(ssp, lambda x, y, t: 0.25 + 0.5 * x * y)
    state = PassiveScalarState(phi_prev=phi.copy(), phi=phi.copy())
    out = step_scalar(state, vsp.zero_function(), 0.01)
    assert np.abs(out.phi.coeffs - phi.coeffs).max() < 1e-9


def test_step_scalar_clamps_out_of_range_history():
    mesh = build_structured_rect(4, 4)
    ssp = build_space(mesh, "P2", 1)
    vsp = build_space(mesh, "P2", 2)
    # history outside [0,1]: pure mass dynamics reproduces it, clamp rails it
    wild = interpolate(ssp, lambda x, y, t: 1.5 * np.sin(6 * x * y) )
    state = PassiveScalarState(phi_prev=wild.copy(), phi=wild.copy())
    out = step_scalar(state, vsp.zero_function(), 0.02)
    assert out.phi.coeffs.min() >= 0.0
    assert out.phi.coeffs.max() <= 1.0


def test_step_scalar_constant_fixed_point_for_solenoidal_wind():
    mesh = build_structured_rect(8, 8)
    ssp = build_space(mesh, "P2", 1)
    vsp = build_space(mesh, "P2", 2)

    def wind(x, y, t):
        psi_x = 2 * x * (1 - x) * (1 - 2 * x) * (y * (1 - y)) ** 2
        psi_y = 2 * y * (1 - y) * (1 - 2 * y) * (x * (1 - x)) ** 2
        return psi_y, -psi_x

    w = interpolate(vsp, wind, 0.0)
    c = 0.4
    phi = interpolate(ssp, lambda x, y, t: np.full_like(x, c))
    state = PassiveScalarState(phi_prev=phi.copy(), phi=phi.copy())
    # the skew transport form only annihilates constants up to the divergence
    # of the interpolated wind, so the fixed point holds to O(dt * interp)
    out = step_scalar(state, w, 0.01)
    assert np.abs(out.phi.coeffs - c).max() < 1e-4
    out_finer = step_scalar(state, w, 0.001)
    assert np.abs(out_finer.phi.coeffs - c).max() < 2e-5


def test_stirring_zero_torque_leaves_scalar_frozen():
    prob = stirring_2d()
    prob.f_w = None  # no torque, no flow
    from microrb.scheme import ProjectionScheme
    scheme = ProjectionScheme(prob, 8)
    state, rows, _ = scheme.run(0.05, 0.25)
    phi0 = interpolate(scheme.sspace,
                       prob.passive.initial(scheme.mesh.nominal_h), 0.0)
    assert np.abs(state.u.coeffs).max() < 1e-12
    assert np.abs(state.phi.phi.coeffs - clamp_unit(phi0.coeffs)).max() < 1e-8
