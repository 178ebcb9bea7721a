import math

import numpy as np
import pytest

from microrb import assembly as asm
from microrb.fem import build_space, interpolate
from microrb.mesh import Mesh, build_structured_rect


def reference_triangle_mesh():
    return Mesh(nodes=np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]),
                triangles=np.array([[0, 1, 2]]), boundary_facets=[],
                nominal_h=1.0, bounds=(0.0, 1.0, 0.0, 1.0))


def test_p1_mass_reference_triangle():
    sp = build_space(reference_triangle_mesh(), "P1", 1)
    m = asm.mass_matrix(sp).csr.toarray()
    exact = np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0
    assert np.abs(m - exact).max() < 1e-14


def test_p1_stiffness_reference_triangle():
    sp = build_space(reference_triangle_mesh(), "P1", 1)
    k = asm.stiffness_matrix(sp).csr.toarray()
    exact = np.array([[2, -1, -1], [-1, 1, 0], [-1, 0, 1]]) / 2.0
    assert np.abs(k - exact).max() < 1e-14


def test_mass_total_sum_is_area():
    for bounds, area in (((0, 1, 0, 1), 1.0), ((-1, 1, -1, 1), 4.0)):
        m = build_structured_rect(6, 6, bounds)
        sp = build_space(m, "P2", 1)
        assert math.isclose(asm.mass_matrix(sp).csr.sum(), area, rel_tol=1e-12)


def test_mass_and_stiffness_exactly_symmetric():
    m = build_structured_rect(5, 4)
    for kind in ("P1", "P2"):
        sp = build_space(m, kind, 1)
        mm = asm.mass_matrix(sp).csr
        kk = asm.stiffness_matrix(sp).csr
        assert abs(mm - mm.T).max() == 0.0
        assert abs(kk - kk.T).max() == 0.0


def test_stiffness_row_sums_and_scaling():
    m = build_structured_rect(4, 4)
    sp = build_space(m, "P2", 1)
    k1 = asm.stiffness_matrix(sp, 1.0)
    assert np.abs(np.asarray(k1.csr.sum(axis=1))).max() < 1e-13
    k2 = asm.stiffness_matrix(sp, 2.0)
    assert np.abs(k2.csr - 2.0 * k1.csr).max() < 1e-15


def test_stiffness_rejects_nonpositive_coeff():
    sp = build_space(build_structured_rect(2, 2), "P1", 1)
    with pytest.raises(ValueError):
        asm.stiffness_matrix(sp, 0.0)


def test_convection_zero_wind():
    m = build_structured_rect(4, 4)
    sp = build_space(m, "P2", 1)
    vsp = build_space(m, "P2", 2)
    wind = vsp.zero_function()
    c = asm.convection_matrix(sp, wind)
    assert abs(c.csr).max() == 0.0


def test_convection_exact_antisymmetry_and_energy_neutrality():
    m = build_structured_rect(6, 6)
    sp = build_space(m, "P2", 1)
    vsp = build_space(m, "P2", 2)
    wind = interpolate(vsp, lambda x, y, t: (x * y + 1.0, np.cos(x) - y), 0.0)
    c = asm.convection_matrix(sp, wind)
    assert abs(c.csr + c.csr.T).max() == 0.0
    rng = np.random.default_rng(5)
    for _ in range(20):
        v = rng.standard_normal(sp.ndof)
        assert abs(v @ (c.csr @ v)) <= 1e-12 * float(v @ v)


def test_convection_mesh_mismatch():
    sp = build_space(build_structured_rect(3, 3), "P2", 1)
    vsp = build_space(build_structured_rect(4, 4), "P2", 2)
    with pytest.raises(ValueError):
        asm.convection_matrix(sp, vsp.zero_function())


def test_curl_scalar_constant_is_zero():
    m = build_structured_rect(4, 4)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)
    w = interpolate(ssp, lambda x, y, t: np.full_like(x, 2.5))
    assert np.abs(asm.curl_scalar_to_vector_rhs(vsp, w, 3.0)).max() < 1e-14
    lin = interpolate(ssp, lambda x, y, t: x)
    assert np.abs(asm.curl_scalar_to_vector_rhs(vsp, lin, 0.0)).max() == 0.0


def test_curl_scalar_linear_field_hand_integral():
    # w = x gives curl w = (0, -1): second-component entries integrate -phi_i,
    # so their total equals -area by partition of unity
    m = build_structured_rect(4, 4)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)
    w = interpolate(ssp, lambda x, y, t: x)
    r = asm.curl_scalar_to_vector_rhs(vsp, w, 1.0)
    n = vsp.n_scalar
    assert abs(r[:n].sum()) < 1e-13            # first component: d w / d y = 0
    assert math.isclose(r[n:].sum(), -1.0, rel_tol=1e-12)


def test_curl_vector_cases():
    m = build_structured_rect(5, 5)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)
    const = interpolate(vsp, lambda x, y, t: (np.full_like(x, 1.2),
                                              np.full_like(x, -0.3)))
    assert np.abs(asm.curl_vector_to_scalar_rhs(ssp, const, 2.0)).max() < 1e-13

    rigid = interpolate(vsp, lambda x, y, t: (-y, x))
    r = asm.curl_vector_to_scalar_rhs(ssp, rigid, 1.5)
    # curl (-y, x) = 2: entries are 2 * factor * integral of basis
    mass_rows = np.asarray(asm.mass_matrix(ssp).csr.sum(axis=1)).ravel()
    assert np.allclose(r, 2.0 * 1.5 * mass_rows, atol=1e-13)

    # gradient field of a quadratic interpolated exactly on P2 has zero curl
    grad = interpolate(vsp, lambda x, y, t: (2 * x + y, x - 4 * y))
    assert np.abs(asm.curl_vector_to_scalar_rhs(ssp, grad, 1.0)).max() < 1e-12


def test_grad_pressure_rhs():
    m = build_structured_rect(4, 4)
    vsp = build_space(m, "P2", 2)
    psp = build_space(m, "P1", 1)
    const = interpolate(psp, lambda x, y, t: np.full_like(x, 7.0))
    assert np.abs(asm.grad_pressure_rhs(vsp, const)).max() < 1e-13

    p = interpolate(psp, lambda x, y, t: x)
    r = asm.grad_pressure_rhs(vsp, p)
    n = vsp.n_scalar
    assert math.isclose(r[:n].sum(), 1.0, rel_tol=1e-12)  # sum phi = 1, area 1
    assert abs(r[n:].sum()) < 1e-13

    q = interpolate(psp, lambda x, y, t: 2.0 * x)
    assert np.allclose(asm.grad_pressure_rhs(vsp, q), 2.0 * r, atol=1e-14)


def test_div_velocity_rhs():
    m = build_structured_rect(5, 5)
    vsp = build_space(m, "P2", 2)
    psp = build_space(m, "P1", 1)
    rigid = interpolate(vsp, lambda x, y, t: (-y, x))
    assert np.abs(asm.div_velocity_rhs(psp, rigid)).max() < 1e-13

    ux = interpolate(vsp, lambda x, y, t: (x, np.zeros_like(x)))
    r = asm.div_velocity_rhs(psp, ux)
    assert math.isclose(r.sum(), 1.0, rel_tol=1e-12)

    assert np.abs(asm.div_velocity_rhs(psp, vsp.zero_function())).max() == 0.0


def test_buoyancy_rhs():
    m = build_structured_rect(4, 4)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)
    zero = ssp.zero_function()
    assert np.abs(asm.buoyancy_rhs(vsp, zero, (0.0, 1.0))).max() == 0.0

    one = interpolate(ssp, lambda x, y, t: np.ones_like(x))
    r = asm.buoyancy_rhs(vsp, one, (0.0, 1.0))
    n = vsp.n_scalar
    assert math.isclose(r[n:].sum(), 1.0, rel_tol=1e-12)
    assert np.abs(r[:n]).max() == 0.0

    r_swapped = asm.buoyancy_rhs(vsp, one, (1.0, 0.0))
    assert np.allclose(r_swapped[:n], r[n:], atol=1e-15)
    assert np.abs(r_swapped[n:]).max() == 0.0


def test_velocity_dot_e_rhs():
    m = build_structured_rect(4, 4)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)
    assert np.abs(asm.velocity_dot_e_rhs(ssp, vsp.zero_function(), (0, 1))).max() == 0.0

    u = interpolate(vsp, lambda x, y, t: (np.zeros_like(x), np.ones_like(x)))
    r = asm.velocity_dot_e_rhs(ssp, u, (0.0, 1.0))
    assert math.isclose(r.sum(), 1.0, rel_tol=1e-12)
    assert np.abs(asm.velocity_dot_e_rhs(ssp, u, (1.0, 0.0))).max() < 1e-14


def test_source_rhs_constant_and_zero():
    m = build_structured_rect(4, 4)
    ssp = build_space(m, "P2", 1)
    z = asm.source_rhs(ssp, lambda x, y, t: np.zeros_like(x))
    assert np.abs(z).max() == 0.0
    one = asm.source_rhs(ssp, lambda x, y, t: np.ones_like(x))
    assert math.isclose(one.sum(), 1.0, rel_tol=1e-12)


def test_source_rhs_torque_integral():
    # integral of 25(x-1) over (-1,1)^2 is -100: x has zero mean, area is 4
    m = build_structured_rect(8, 8, (-1.0, 1.0, -1.0, 1.0))
    ssp = build_space(m, "P2", 1)
    r = asm.source_rhs(ssp, lambda x, y, t: 25.0 * (x - 1.0))
    assert math.isclose(r.sum(), -100.0, rel_tol=1e-12)


def test_greens_identity_sign_conventions():
    # (grad p, v) = -(p, div v) for v vanishing on the boundary, which ties
    # the grad and div assembly signs together
    m = build_structured_rect(8, 8)
    vsp = build_space(m, "P2", 2)
    psp = build_space(m, "P1", 1)

    def bubble(x, y, t):
        b = (x * (1 - x) * y * (1 - y)) ** 1
        return 16 * b, -8 * b

    v = interpolate(vsp, bubble)
    p = interpolate(psp, lambda x, y, t: 1.0 + 2.0 * x - y)
    lhs = asm.grad_pressure_rhs(vsp, p) @ v.coeffs
    pv, _ = np.broadcast_arrays(p.coeffs, p.coeffs)
    rhs = -(asm.div_velocity_rhs(psp, v) @ p.coeffs)
    assert math.isclose(lhs, rhs, rel_tol=1e-10)


def test_curl_adjoint_identity():
    # (curl w, v) = (w, curl v) for v vanishing on the boundary
    m = build_structured_rect(8, 8)
    vsp = build_space(m, "P2", 2)
    ssp = build_space(m, "P2", 1)

    def bubble(x, y, t):
        b = x * (1 - x) * y * (1 - y)
        return 3.0 * b, 2.0 * b

    v = interpolate(vsp, bubble)
    w = interpolate(ssp, lambda x, y, t: np.sin(x + 0.5 * y))
    lhs = asm.curl_scalar_to_vector_rhs(vsp, w, 1.0) @ v.coeffs
    rhs = asm.curl_vector_to_scalar_rhs(ssp, v, 1.0) @ w.coeffs
    assert math.isclose(lhs, rhs, rel_tol=1e-9)
