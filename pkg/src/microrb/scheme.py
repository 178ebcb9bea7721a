"""Five-step decoupled pressure-projection time stepper with BDF2 in time.

Each advance solves, in order and exactly once each: a velocity predictor
with explicit extrapolated wind, a pressure Poisson update, an L2 velocity
correction, the angular-velocity transport, and the temperature transport.
The first step from the initial data is a single backward-Euler projection
step of the same shape (wind and coupling fields taken at level 0).

In 2D the angular velocity is a scalar field and the grad-div term of the
angular equation vanishes identically, so it is not assembled.

All three transport operators share one CSR pattern on the scalar P2 space
and act componentwise on the velocity, so each time step rebuilds only data
arrays and solves five (six counting both velocity components) independent
linear systems.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import assembly as asm
from . import sparse
from .fem import FeFunction, FeSpace, build_space, eval_all_elements, interpolate
from .mesh import BOUNDARY_TAGS, Mesh, build_structured_rect
from .sparse import SolverConfig, SparseMatrix, project_zero_mean

# tag application order: later tags override earlier ones at shared corner
# dofs, so the default gives left/right precedence at corners
DEFAULT_TAG_ORDER = ("bottom", "top", "left", "right")


class SolverFailure(RuntimeError):
    """A Krylov solve failed to reach its tolerance inside a scheme step."""

    def __init__(self, step: str, result):
        super().__init__(
            f"{step}: no convergence after {result.iterations} iterations, "
            f"relative residual {result.residual:.3e}")
        self.step = step
        self.result = result


@dataclass(frozen=True)
class PhysicalParams:
    """Material constants and the unit buoyancy direction."""

    chi: float = 0.1       # micro-rotation viscosity
    mu: float = 1.0        # Newtonian kinematic viscosity
    upsilon: float = 0.1   # angular viscosity
    eta: float = 1.0       # grad-div coefficient, unused in 2D
    zeta: float = 1.0      # inertia density
    kappa: float = 0.1     # thermal diffusivity
    e: tuple = (0.0, 1.0)

    def __post_init__(self):
        for name in ("chi", "mu", "upsilon", "kappa", "zeta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if abs(math.hypot(*self.e) - 1.0) > 1e-12:
            raise ValueError("buoyancy direction e must be a unit vector")


@dataclass
class FieldBc:
    """Per-tag prescription for one field: callable -> Dirichlet data,
    None -> homogeneous Neumann. `tag_order` decides corner precedence
    (later tags win)."""

    dirichlet: dict
    tag_order: tuple = DEFAULT_TAG_ORDER

    def __post_init__(self):
        unknown = set(self.dirichlet) - set(BOUNDARY_TAGS)
        if unknown:
            raise ValueError(f"unknown boundary tags {sorted(unknown)}")
        for tag in BOUNDARY_TAGS:
            self.dirichlet.setdefault(tag, None)


@dataclass
class BoundaryConditions:
    """Prescriptions for u, w (angular) and theta. Pressure is always
    natural with zero-mean normalization."""

    u: FieldBc
    w: FieldBc
    theta: FieldBc


@dataclass
class EnergyRow:
    """Per-step stability monitors (squared L2 quantities)."""

    step: int
    time: float
    u_sq: float
    u_extrap_sq: float          # ||2 u^{n+1} - u^n||^2
    w_sq_zeta: float
    w_extrap_sq_zeta: float
    th_sq: float
    th_extrap_sq: float
    p_grad_sq_scaled: float     # (dt^2/3) ||grad p||^2
    dissipation: float

    @property
    def composite(self) -> float:
        return (self.u_sq + self.u_extrap_sq + self.w_sq_zeta
                + self.w_extrap_sq_zeta + self.th_sq + self.th_extrap_sq
                + self.p_grad_sq_scaled)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) and v >= 0.0 for v in (
            self.u_sq, self.u_extrap_sq, self.w_sq_zeta, self.w_extrap_sq_zeta,
            self.th_sq, self.th_extrap_sq, self.p_grad_sq_scaled))


ENERGY_COLUMNS = ("step", "time", "u_sq", "u_extrap_sq", "w_sq_zeta",
                  "w_extrap_sq_zeta", "th_sq", "th_extrap_sq",
                  "p_grad_sq_scaled", "dissipation", "composite")


@dataclass
class SchemeState:
    """Rolling time levels; `u_tilde` is the last predictor solution.
    `phi` carries the passive-scalar levels when the problem transports one."""

    u_prev: FeFunction
    u: FeFunction
    u_tilde: FeFunction
    p_prev: FeFunction
    p: FeFunction
    w_prev: FeFunction
    w: FeFunction
    th_prev: FeFunction
    th: FeFunction
    step: int
    time: float
    dt: float
    solve_log: dict = field(default_factory=dict)
    phi: object = None


@dataclass
class _StepContext:
    """Per-step precomputed pieces shared by the five solves.

    alpha is the implicit time-derivative coefficient (1/dt at startup,
    3/(2 dt) for BDF2); gamma the pressure-correction factor (dt, 2 dt / 3);
    hist_* the matching explicit history combinations."""

    t_new: float
    alpha: float
    gamma: float
    wind_u: FeFunction
    wind_w: FeFunction
    wind_th: FeFunction
    conv_data: np.ndarray
    wind_vals: np.ndarray
    wind_grads: np.ndarray
    hist_u: np.ndarray
    hist_w: np.ndarray
    hist_th: np.ndarray
    log: dict


def extrapolate(curr: FeFunction, prev: FeFunction) -> FeFunction:
    """Second-order explicit guess 2 x^n - x^{n-1}."""
    return FeFunction(curr.space, 2.0 * curr.coeffs - prev.coeffs)


class ProjectionScheme:
    """Discretization plus the step operators for one problem instance.

    Spaces are the P2(vector) / P1 / P2 / P2 choice for velocity, pressure,
    angular velocity and temperature; angular velocity and temperature share
    one scalar P2 space object.
    """

    def __init__(self, problem, n: int,
                 sym_cfg: SolverConfig | None = None,
                 nonsym_cfg: SolverConfig | None = None):
        self.problem = problem
        self.params = problem.params
        self.mesh: Mesh = build_structured_rect(n, n, problem.bounds)
        self.vspace: FeSpace = build_space(self.mesh, "P2", 2)
        self.pspace: FeSpace = build_space(self.mesh, "P1", 1)
        self.sspace: FeSpace = build_space(self.mesh, "P2", 1)

        self.sym_cfg = sym_cfg or SolverConfig(method="cg", preconditioner="jacobi")
        self.nonsym_cfg = nonsym_cfg or SolverConfig(method="bicgstab",
                                                     preconditioner="ilu0")

        self.ms = asm.mass_matrix(self.sspace)          # scalar P2 mass
        self.ks = asm.stiffness_matrix(self.sspace)     # scalar P2 stiffness
        self.mp = asm.mass_matrix(self.pspace)          # pressure mass
        self.kp = asm.stiffness_matrix(self.pspace)     # pressure Poisson
        self.pressure_weights = np.asarray(self.mp.csr.sum(axis=1)).ravel()
        self._kp_precond = sparse.build_preconditioner(
            self.kp, self.sym_cfg.preconditioner)
        # ||q_i||_0 for the discrete-divergence bound
        self.pressure_basis_norms = np.sqrt(self.mp.csr.diagonal())

        self.pattern = asm.OperatorPattern(self.sspace)
        if not (np.array_equal(self.ms.csr.indices, self.pattern.indices)
                and np.array_equal(self.ms.csr.indptr, self.pattern.indptr)):
            raise RuntimeError("operator pattern mismatch")
        self._m_data = self.ms.csr.data
        self._k_data = self.ks.csr.data
        self._elim_cache: dict = {}
        self._ms_precond = sparse.build_preconditioner(
            self.ms, self.sym_cfg.preconditioner)
        self._frozen_precond: dict = {}

    # -- boundary data -----------------------------------------------------

    def _dirichlet_scalar(self, space: FeSpace, bc: FieldBc, t: float):
        vals: dict[int, float] = {}
        x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
        for tag in bc.tag_order:
            fn = bc.dirichlet.get(tag)
            if fn is None:
                continue
            ids = space.boundary_scalar_dofs[tag]
            data = np.broadcast_to(np.asarray(fn(x[ids], y[ids], t), dtype=float),
                                   ids.shape)
            for i, v in zip(ids, data):
                vals[int(i)] = float(v)
        dofs = np.array(sorted(vals), dtype=np.int64)
        return dofs, np.array([vals[d] for d in dofs])

    def _dirichlet_vector(self, bc: FieldBc, t: float):
        """Constrained scalar dofs plus per-component values."""
        space = self.vspace
        vals0: dict[int, float] = {}
        vals1: dict[int, float] = {}
        x, y = space.dof_coords[:, 0], space.dof_coords[:, 1]
        for tag in bc.tag_order:
            fn = bc.dirichlet.get(tag)
            if fn is None:
                continue
            ids = space.boundary_scalar_dofs[tag]
            fx, fy = fn(x[ids], y[ids], t)
            fx = np.broadcast_to(np.asarray(fx, dtype=float), ids.shape)
            fy = np.broadcast_to(np.asarray(fy, dtype=float), ids.shape)
            for i, vx, vy in zip(ids, fx, fy):
                vals0[int(i)] = float(vx)
                vals1[int(i)] = float(vy)
        dofs = np.array(sorted(vals0), dtype=np.int64)
        return (dofs, np.array([vals0[d] for d in dofs]),
                np.array([vals1[d] for d in dofs]))

    def _eliminate(self, data: np.ndarray, b: np.ndarray, dofs: np.ndarray,
                   values: np.ndarray):
        """Symmetric Dirichlet elimination on the shared pattern (same
        result as sparse.apply_dirichlet, amortized for the time loop)."""
        key = dofs.tobytes()
        cached = self._elim_cache.get(key)
        if cached is None:
            mask, diag_pos = self.pattern.dirichlet_mask(dofs)
            keep = np.ones(self.sspace.ndof)
            keep[dofs] = 0.0
            cached = (mask, diag_pos, keep)
            self._elim_cache[key] = cached
        mask, diag_pos, keep = cached
        a_full = self.pattern.matrix(data)
        lifted = np.zeros(self.sspace.ndof)
        lifted[dofs] = values
        b_new = keep * (b - a_full.csr @ lifted)
        b_new[dofs] = values
        data2 = data * mask
        data2[diag_pos] = 1.0
        return self.pattern.matrix(data2), b_new

    # -- single solves -------------------------------------------------------

    def _solve_or_fail(self, step_name, a, b, cfg, precond_op=None):
        res = sparse.solve(a, b, cfg, precond_op=precond_op)
        if not res.converged:
            raise SolverFailure(step_name, res)
        return res

    def _transport_precond(self, label: str, alpha: float, frozen_data_fn,
                           dofs: np.ndarray):
        """Incomplete factorization of the wind-independent operator part
        (after elimination), built once per (equation, time-level kind) and
        reused every step. The Krylov stopping test still uses the true
        residual of the full matrix, so only iteration counts depend on this.
        Returns None for non-ilu0 configs (the solver builds its own)."""
        if self.nonsym_cfg.preconditioner != "ilu0":
            return None
        key = (label, round(alpha, 12), dofs.tobytes())
        op = self._frozen_precond.get(key)
        if op is None:
            mask, diag_pos = self.pattern.dirichlet_mask(dofs)
            data = frozen_data_fn() * mask
            data[diag_pos] = 1.0
            op = sparse.build_preconditioner(self.pattern.matrix(data), "ilu0")
            self._frozen_precond[key] = op
        return op

    def _forcing(self, space, fn, t):
        if fn is None:
            return np.zeros(space.ndof)
        return asm.source_rhs(space, fn, t)

    # -- the five scheme steps ------------------------------------------------

    def step_velocity_predict(self, state: SchemeState, ctx: _StepContext) -> FeFunction:
        """Step 1: [alpha M + (chi+mu) K + C] u~ = history - grad p^n
        + 2 chi curl w-bar + theta-bar e + f_u, Dirichlet data at t_new.
        The operator acts componentwise, so the two scalar systems are solved
        against one preconditioner."""
        pr = self.params
        n = self.sspace.n_scalar
        a_data = ctx.alpha * self._m_data + (pr.chi + pr.mu) * self._k_data \
            + ctx.conv_data
        b = np.concatenate([self.ms.csr @ ctx.hist_u[:n],
                            self.ms.csr @ ctx.hist_u[n:]])
        b -= asm.grad_pressure_rhs(self.vspace, state.p)
        b += asm.curl_scalar_to_vector_rhs(self.vspace, ctx.wind_w, 2.0 * pr.chi)
        if self.problem.e_coupling:
            b += asm.buoyancy_rhs(self.vspace, ctx.wind_th, pr.e)
        b += self._forcing(self.vspace, self.problem.f_u, ctx.t_new)

        dofs, v0, v1 = self._dirichlet_vector(self.problem.bcs.u, ctx.t_new)
        a0, b0 = self._eliminate(a_data, b[:n], dofs, v0)
        _, b1 = self._eliminate(a_data, b[n:], dofs, v1)
        op = self._transport_precond(
            "velocity", ctx.alpha,
            lambda: ctx.alpha * self._m_data + (pr.chi + pr.mu) * self._k_data,
            dofs)
        results = sparse.solve_multi(a0, (b0, b1), self.nonsym_cfg, precond_op=op)
        for k, res in enumerate(results):
            if not res.converged:
                raise SolverFailure(f"velocity_predict[component {k}]", res)
        ctx.log["velocity_predict"] = tuple(
            (r.iterations, r.residual) for r in results)
        return FeFunction(self.vspace, np.concatenate([results[0].x, results[1].x]))

    def step_pressure(self, state: SchemeState, u_tilde: FeFunction,
                      ctx: _StepContext) -> FeFunction:
        """Step 2: (grad p_new, grad q) = -alpha (div u~, q)
        + (grad p_old, grad q), zero-mean normalized."""
        b = -ctx.alpha * asm.div_velocity_rhs(self.pspace, u_tilde)
        b += self.kp.csr @ state.p.coeffs
        # kernel of the Neumann operator is the constants: project the data
        # onto its range so cg stays consistent (exact no-op for impermeable
        # boundaries, O(interpolated boundary flux) otherwise)
        b -= b.mean()
        res = self._solve_or_fail("pressure_poisson", self.kp, b, self.sym_cfg,
                                  precond_op=self._kp_precond)
        ctx.log["pressure_poisson"] = (res.iterations, res.residual)
        return project_zero_mean(FeFunction(self.pspace, res.x),
                                 self.pressure_weights)

    def step_velocity_correct(self, state: SchemeState, u_tilde: FeFunction,
                              p_new: FeFunction, ctx: _StepContext) -> FeFunction:
        """Step 3: L2-project u~ - gamma grad(p_new - p_old) onto the
        velocity space through componentwise mass solves."""
        dp = FeFunction(self.pspace, p_new.coeffs - state.p.coeffs)
        rhs = asm.mass_action_vector(self.ms, u_tilde) \
            - ctx.gamma * asm.grad_pressure_rhs(self.vspace, dp)
        n = self.sspace.n_scalar
        out = np.empty(2 * n)
        for comp in range(2):
            res = self._solve_or_fail(f"velocity_correct[component {comp}]",
                                      self.ms, rhs[comp * n:(comp + 1) * n],
                                      self.sym_cfg,
                                      precond_op=self._ms_precond)
            out[comp * n:(comp + 1) * n] = res.x
        ctx.log["velocity_correct"] = True
        return FeFunction(self.vspace, out)

    def step_angular(self, state: SchemeState, ctx: _StepContext) -> FeFunction:
        """Step 4: [zeta alpha M + upsilon K + zeta C + 4 chi M] w =
        zeta history + 2 chi curl u-bar + torque."""
        pr = self.params
        a_data = (pr.zeta * ctx.alpha + 4.0 * pr.chi) * self._m_data \
            + pr.upsilon * self._k_data + pr.zeta * ctx.conv_data
        curl = ctx.wind_grads[:, :, 1, 0] - ctx.wind_grads[:, :, 0, 1]
        b = pr.zeta * (self.ms.csr @ ctx.hist_w)
        b += asm.integrate_scalar_field(self.sspace, 2.0 * pr.chi * curl)
        b += self._forcing(self.sspace, self.problem.f_w, ctx.t_new)
        dofs, vals = self._dirichlet_scalar(self.sspace, self.problem.bcs.w,
                                            ctx.t_new)
        a, b = self._eliminate(a_data, b, dofs, vals)
        op = self._transport_precond(
            "angular", ctx.alpha,
            lambda: (pr.zeta * ctx.alpha + 4.0 * pr.chi) * self._m_data
            + pr.upsilon * self._k_data, dofs)
        res = self._solve_or_fail("angular", a, b, self.nonsym_cfg, precond_op=op)
        ctx.log["angular"] = (res.iterations, res.residual)
        return FeFunction(self.sspace, res.x)

    def step_temperature(self, state: SchemeState, ctx: _StepContext) -> FeFunction:
        """Step 5: [alpha M + kappa K + C] theta = history + u-bar . e + f."""
        pr = self.params
        a_data = ctx.alpha * self._m_data + pr.kappa * self._k_data + ctx.conv_data
        b = self.ms.csr @ ctx.hist_th
        if self.problem.e_coupling:
            ue = (ctx.wind_vals[:, :, 0] * pr.e[0]
                  + ctx.wind_vals[:, :, 1] * pr.e[1])
            b += asm.integrate_scalar_field(self.sspace, ue)
        b += self._forcing(self.sspace, self.problem.f_th, ctx.t_new)
        dofs, vals = self._dirichlet_scalar(self.sspace, self.problem.bcs.theta,
                                            ctx.t_new)
        a, b = self._eliminate(a_data, b, dofs, vals)
        op = self._transport_precond(
            "temperature", ctx.alpha,
            lambda: ctx.alpha * self._m_data + pr.kappa * self._k_data, dofs)
        res = self._solve_or_fail("temperature", a, b, self.nonsym_cfg,
                                  precond_op=op)
        ctx.log["temperature"] = (res.iterations, res.residual)
        return FeFunction(self.sspace, res.x)

    # -- startup and advance ---------------------------------------------------

    def _make_context(self, t_new, alpha, gamma, wind_u, wind_w, wind_th,
                      hist_u, hist_w, hist_th) -> _StepContext:
        wind_vals, wind_grads = eval_all_elements(wind_u)
        conv_data = self.pattern.convection_data(wind_vals)
        return _StepContext(t_new=t_new, alpha=alpha, gamma=gamma,
                            wind_u=wind_u, wind_w=wind_w, wind_th=wind_th,
                            conv_data=conv_data, wind_vals=wind_vals,
                            wind_grads=wind_grads, hist_u=hist_u,
                            hist_w=hist_w, hist_th=hist_th, log={})

    def initialize(self, dt: float, init_mode: str = "interpolate") -> SchemeState:
        """Interpolate (or L2-project) the level-0 data and take one
        backward-Euler projection step to populate level 1."""
        if dt <= 0:
            raise ValueError("dt must be positive")
        prob = self.problem
        if init_mode == "interpolate":
            u0 = interpolate(self.vspace, prob.init_u, 0.0)
            w0 = interpolate(self.sspace, prob.init_w, 0.0)
            th0 = interpolate(self.sspace, prob.init_th, 0.0)
        elif init_mode == "l2":
            u0 = FeFunction(self.vspace, self._l2_vector(prob.init_u))
            w0 = FeFunction(self.sspace, self._l2_scalar(prob.init_w))
            th0 = FeFunction(self.sspace, self._l2_scalar(prob.init_th))
        else:
            raise ValueError(f"unknown init mode {init_mode!r}")
        if prob.init_p is None:
            p0 = self.pspace.zero_function()
        else:
            p0 = project_zero_mean(interpolate(self.pspace, prob.init_p, 0.0),
                                   self.pressure_weights)

        state = SchemeState(u_prev=u0, u=u0, u_tilde=u0.copy(),
                            p_prev=p0, p=p0, w_prev=w0, w=w0,
                            th_prev=th0, th=th0, step=0, time=0.0, dt=dt)

        # backward-Euler projection step with explicit level-0 couplings
        ctx = self._make_context(
            t_new=dt, alpha=1.0 / dt, gamma=dt, wind_u=u0, wind_w=w0,
            wind_th=th0, hist_u=u0.coeffs / dt, hist_w=w0.coeffs / dt,
            hist_th=th0.coeffs / dt)
        u_tilde = self.step_velocity_predict(state, ctx)
        p1 = self.step_pressure(state, u_tilde, ctx)
        u1 = self.step_velocity_correct(state, u_tilde, p1, ctx)
        w1 = self.step_angular(state, ctx)
        th1 = self.step_temperature(state, ctx)

        phi = None
        if prob.passive is not None:
            from .problems import PassiveScalarState, clamp_unit, step_scalar
            phi0 = interpolate(self.sspace, prob.passive.initial(
                self.mesh.nominal_h), 0.0)
            phi0 = FeFunction(self.sspace, clamp_unit(phi0.coeffs))
            phi = step_scalar(PassiveScalarState(phi_prev=phi0, phi=phi0),
                              u0, dt, mass=self.ms,
                              conv=self.pattern.matrix(ctx.conv_data),
                              startup=True)

        return SchemeState(u_prev=u0, u=u1, u_tilde=u_tilde, p_prev=p0, p=p1,
                           w_prev=w0, w=w1, th_prev=th0, th=th1,
                           step=1, time=dt, dt=dt, solve_log=ctx.log, phi=phi)

    def _l2_scalar(self, fn) -> np.ndarray:
        b = asm.source_rhs(self.sspace, fn, 0.0)
        return self._solve_or_fail("l2_init", self.ms, b, self.sym_cfg,
                                   precond_op=self._ms_precond).x

    def _l2_vector(self, fn) -> np.ndarray:
        b = asm.source_rhs(self.vspace, fn, 0.0)
        n = self.sspace.n_scalar
        out = np.empty(2 * n)
        for comp in range(2):
            res = self._solve_or_fail("l2_init", self.ms,
                                      b[comp * n:(comp + 1) * n], self.sym_cfg,
                                      precond_op=self._ms_precond)
            out[comp * n:(comp + 1) * n] = res.x
        return out

    def advance(self, state: SchemeState) -> tuple[SchemeState, EnergyRow]:
        """One full BDF2 projection step: Steps 1-5 in order, then roll the
        levels and compute the stability monitors."""
        dt = state.dt
        ctx = self._make_context(
            t_new=state.time + dt, alpha=1.5 / dt, gamma=2.0 * dt / 3.0,
            wind_u=extrapolate(state.u, state.u_prev),
            wind_w=extrapolate(state.w, state.w_prev),
            wind_th=extrapolate(state.th, state.th_prev),
            hist_u=(4.0 * state.u.coeffs - state.u_prev.coeffs) / (2.0 * dt),
            hist_w=(4.0 * state.w.coeffs - state.w_prev.coeffs) / (2.0 * dt),
            hist_th=(4.0 * state.th.coeffs - state.th_prev.coeffs) / (2.0 * dt))

        u_tilde = self.step_velocity_predict(state, ctx)
        p_new = self.step_pressure(state, u_tilde, ctx)
        u_new = self.step_velocity_correct(state, u_tilde, p_new, ctx)
        w_new = self.step_angular(state, ctx)
        th_new = self.step_temperature(state, ctx)

        phi = None
        if state.phi is not None:
            from .problems import step_scalar
            phi = step_scalar(state.phi, ctx.wind_u, dt, mass=self.ms,
                              conv=self.pattern.matrix(ctx.conv_data))

        new_state = SchemeState(
            u_prev=state.u, u=u_new, u_tilde=u_tilde,
            p_prev=state.p, p=p_new,
            w_prev=state.w, w=w_new,
            th_prev=state.th, th=th_new,
            step=state.step + 1, time=state.time + dt, dt=dt,
            solve_log=ctx.log, phi=phi)
        return new_state, self.energy_row(new_state)

    # -- monitors ---------------------------------------------------------------

    def energy_row(self, state: SchemeState) -> EnergyRow:
        pr = self.params
        dt = state.dt
        n = self.sspace.n_scalar

        def vnorm(c):
            return asm.l2_norm_sq(self.ms, c[:n]) + asm.l2_norm_sq(self.ms, c[n:])

        def vgrad(c):
            return asm.l2_norm_sq(self.ks, c[:n]) + asm.l2_norm_sq(self.ks, c[n:])

        def snorm(c):
            return asm.l2_norm_sq(self.ms, c)

        u, up = state.u.coeffs, state.u_prev.coeffs
        w, wp = state.w.coeffs, state.w_prev.coeffs
        th, thp = state.th.coeffs, state.th_prev.coeffs
        diss = (dt * (pr.chi + pr.mu) * vgrad(state.u_tilde.coeffs)
                + dt * pr.upsilon * asm.l2_norm_sq(self.ks, w)
                + 16.0 * pr.chi * dt * snorm(w)
                + dt * pr.kappa * asm.l2_norm_sq(self.ks, th))
        return EnergyRow(
            step=state.step, time=state.time,
            u_sq=vnorm(u), u_extrap_sq=vnorm(2 * u - up),
            w_sq_zeta=pr.zeta * snorm(w),
            w_extrap_sq_zeta=pr.zeta * snorm(2 * w - wp),
            th_sq=snorm(th), th_extrap_sq=snorm(2 * th - thp),
            p_grad_sq_scaled=dt * dt / 3.0 * asm.l2_norm_sq(self.kp, state.p.coeffs),
            dissipation=diss)

    def divergence_defect(self, state: SchemeState) -> np.ndarray:
        """Residual of the combined Step 2 + Step 3 weak identity per pressure
        basis function: the weak divergence of the end-of-step velocity (with
        the prescribed boundary flux of the predictor removed) reduces to
        exactly this vector, which is (2 dt / 3) times the Step 2 residual."""
        dt = state.dt
        gamma = 2.0 * dt / 3.0 if state.step > 1 else dt
        return -(asm.div_velocity_rhs(self.pspace, state.u_tilde)
                 + gamma * (self.kp.csr @ (state.p.coeffs - state.p_prev.coeffs)))

    def divergence_defect_bound(self) -> np.ndarray:
        """10 * solver_tol * ||q_i||_0 per pressure basis function."""
        return 10.0 * self.sym_cfg.tol * self.pressure_basis_norms

    # -- driver -------------------------------------------------------------------

    def run(self, dt: float, t_end: float, snapshot_times=(),
            steady_tol: float | None = None, init_mode: str = "interpolate",
            max_steps: int | None = None, on_step=None):
        """March to t_end (dt rounded so the horizon is hit exactly).

        Returns (state, energy rows, snapshots) where snapshots is a list of
        (time, fields dict). `on_step(scheme, state, row)` runs after every
        step; `steady_tol` stops early once ||u^{n+1}-u^n|| / dt drops below
        it."""
        from .postproc import steady_state_residual

        if t_end <= 0:
            raise ValueError("t_end must be positive")
        n_steps = max(1, math.ceil(t_end / dt - 1e-12))
        dt = t_end / n_steps
        if max_steps is not None:
            n_steps = min(n_steps, max_steps)

        snap_left = sorted(snapshot_times)
        snapshots = []

        state = self.initialize(dt, init_mode=init_mode)
        rows = [self.energy_row(state)]
        snap_left = self._maybe_snapshot(state, snap_left, snapshots)
        if on_step:
            on_step(self, state, rows[-1])

        for _ in range(n_steps - 1):
            state, row = self.advance(state)
            rows.append(row)
            snap_left = self._maybe_snapshot(state, snap_left, snapshots)
            if on_step:
                on_step(self, state, row)
            if steady_tol is not None and steady_state_residual(state) < steady_tol:
                break
        return state, rows, snapshots

    def _maybe_snapshot(self, state, snap_left, snapshots):
        remaining = []
        for t in snap_left:
            if t <= state.time + 0.5 * state.dt:
                fields = {"u": state.u.copy(), "p": state.p.copy(),
                          "w": state.w.copy(), "theta": state.th.copy()}
                if state.phi is not None:
                    fields["phi"] = state.phi.phi.copy()
                snapshots.append((state.time, fields))
            else:
                remaining.append(t)
        return remaining
