"""Configuration ingestion and the convergence / cavity / stir drivers.

Configs are flat key=value files ('#' starts a comment); command-line flags
override file values. Every physical parameter has a named key, so each
experiment in the repo is a single checked-in config. The environment
variable MICRORB_WORKERS (an integer) is the only other input: it lets a
convergence study run its mesh resolutions in separate processes.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

from .postproc import (ConvergenceRow, export_csv, export_vtk, h1_error,
                       l2_error, rates, steady_state_residual)
from .problems import cavity_2d, manufactured_2d, stirring_2d
from .scheme import ENERGY_COLUMNS, PhysicalParams, ProjectionScheme, SolverFailure
from .sparse import SolverConfig

EXPERIMENTS = ("convergence", "cavity", "stir")

_DEFAULTS = {
    # Table-style accuracy study on the unit square
    "convergence": dict(resolutions=(8, 16, 24, 32, 40, 48, 56),
                        dt_rule="h_to_3_2", dt=None, t_end=1.0,
                        upsilon=0.1, chi=0.1, mu=1.0, kappa=0.1),
    # thermally driven lid cavity, steady-state hunt
    "cavity": dict(resolutions=(80,), dt_rule="fixed", dt=1e-3, t_end=30.0,
                   upsilon=1.0, chi=0.1, mu=0.1, kappa=0.01, steady_tol=1e-6),
    # torque-driven stirring with the transported marker
    "stir": dict(resolutions=(32,), dt_rule="fixed", dt=1e-2, t_end=5.0,
                 upsilon=2.0, chi=0.1, mu=0.1, kappa=1.0),
}

_CONFIG_KEYS = {
    "experiment", "resolutions", "dt_rule", "dt", "T", "out", "upsilon",
    "chi", "mu", "kappa", "eta", "zeta", "snapshot_times", "solver_tol",
    "solver_maxiter", "nonsym_method", "nonsym_precond", "sym_method",
    "sym_precond", "steady_tol", "init_mode", "lid_corners",
}


@dataclass
class RunConfig:
    """Validated experiment description."""

    experiment: str
    resolutions: tuple
    dt_rule: str = "h_to_3_2"
    dt: float | None = None
    t_end: float = 1.0
    out: str = "out"
    upsilon: float = 0.1
    chi: float = 0.1
    mu: float = 1.0
    kappa: float = 0.1
    eta: float = 1.0
    zeta: float = 1.0
    snapshot_times: tuple = ()
    solver_tol: float = 1e-10
    solver_maxiter: int = 10000
    nonsym_method: str = "bicgstab"
    nonsym_precond: str = "ilu0"
    sym_method: str = "cg"
    sym_precond: str = "jacobi"
    steady_tol: float | None = None
    init_mode: str = "interpolate"
    lid_corners: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(
                f"unknown experiment {self.experiment!r}; choose one of "
                f"{', '.join(EXPERIMENTS)}")
        if not self.resolutions or any(n <= 0 for n in self.resolutions):
            raise ValueError("resolutions must be positive integers")
        if list(self.resolutions) != sorted(set(self.resolutions)):
            raise ValueError("resolutions must be strictly increasing")
        if self.dt_rule not in ("h_to_3_2", "fixed"):
            raise ValueError(f"unknown dt rule {self.dt_rule!r}")
        if self.dt_rule == "fixed" and (self.dt is None or self.dt <= 0):
            raise ValueError("dt_rule=fixed requires a positive dt")
        if self.t_end <= 0:
            raise ValueError("T must be positive")
        for name in ("upsilon", "chi", "mu", "kappa", "zeta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.init_mode not in ("interpolate", "l2"):
            raise ValueError(f"unknown init mode {self.init_mode!r}")

    def params(self) -> PhysicalParams:
        return PhysicalParams(chi=self.chi, mu=self.mu, upsilon=self.upsilon,
                              eta=self.eta, zeta=self.zeta, kappa=self.kappa)

    def dt_for(self, n: int) -> float:
        if self.dt_rule == "fixed":
            return self.dt
        return (1.0 / n) ** 1.5

    def solver_cfgs(self):
        sym = SolverConfig(method=self.sym_method, tol=self.solver_tol,
                           maxiter=self.solver_maxiter,
                           preconditioner=self.sym_precond)
        nonsym = SolverConfig(method=self.nonsym_method, tol=self.solver_tol,
                              maxiter=self.solver_maxiter,
                              preconditioner=self.nonsym_precond)
        return sym, nonsym


def _parse_value(key: str, raw: str):
    if key in ("resolutions",):
        return tuple(int(tok) for tok in raw.split(",") if tok.strip())
    if key in ("snapshot_times",):
        return tuple(float(tok) for tok in raw.split(",") if tok.strip())
    if key in ("solver_maxiter",):
        return int(raw)
    if key in ("lid_corners",):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key} expects a boolean, got {raw!r}")
    if key in ("dt", "T", "upsilon", "chi", "mu", "kappa", "eta", "zeta",
               "solver_tol", "steady_tol"):
        return float(raw)
    return raw


def read_config_file(path: str) -> dict:
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, raw = (tok.strip() for tok in line.split("=", 1))
            if key not in _CONFIG_KEYS:
                raise ValueError(
                    f"{path}:{lineno}: unknown key {key!r}; valid keys: "
                    f"{', '.join(sorted(_CONFIG_KEYS))}")
            values[key] = _parse_value(key, raw)
    return values


def parse_config(experiment: str | None = None, config_path: str | None = None,
                 overrides: dict | None = None) -> RunConfig:
    """Merge experiment defaults, an optional config file, and CLI overrides
    (that order) into a validated RunConfig."""
    values: dict = {}
    if config_path:
        values.update(read_config_file(config_path))
    if "T" in values:
        values["t_end"] = values.pop("T")
    if experiment:
        values["experiment"] = experiment
    if "experiment" not in values:
        raise ValueError("missing experiment (convergence | cavity | stir)")
    merged = dict(_DEFAULTS[values["experiment"]])
    merged.update(values)
    if overrides:
        merged.update({k: v for k, v in overrides.items() if v is not None})
    merged.setdefault("out", "out")
    return RunConfig(**merged)


def _build_problem(cfg: RunConfig):
    if cfg.experiment == "convergence":
        return manufactured_2d(cfg.params())
    if cfg.experiment == "cavity":
        return cavity_2d(chi=cfg.chi, mu=cfg.mu, kappa=cfg.kappa,
                         upsilon=cfg.upsilon, lid_corners=cfg.lid_corners)
    return stirring_2d()


def _convergence_case(args):
    """One resolution of the accuracy study (worker-process safe)."""
    cfg_kwargs, n = args
    cfg = RunConfig(**cfg_kwargs)
    prob = _build_problem(cfg)
    sym, nonsym = cfg.solver_cfgs()
    scheme = ProjectionScheme(prob, n, sym_cfg=sym, nonsym_cfg=nonsym)
    state, energy, _ = scheme.run(cfg.dt_for(n), cfg.t_end,
                                  init_mode=cfg.init_mode)
    ex = prob.exact
    t = state.time
    row = ConvergenceRow(
        one_over_h=n,
        err_u_l2=l2_error(state.u, ex.u, t),
        err_u_h1=h1_error(state.u, ex.grad_u, t),
        err_p_l2=l2_error(state.p, ex.p, t, mean_align=True),
        err_w_l2=l2_error(state.w, ex.w, t),
        err_w_h1=h1_error(state.w, ex.grad_w, t),
        err_t_l2=l2_error(state.th, ex.th, t),
        err_t_h1=h1_error(state.th, ex.grad_th, t))
    return row, [r.__dict__ | {"composite": r.composite} for r in energy]


def run_convergence(cfg: RunConfig) -> list[ConvergenceRow]:
    os.makedirs(cfg.out, exist_ok=True)
    jobs = [(cfg.__dict__.copy(), n) for n in cfg.resolutions]
    workers = int(os.environ.get("MICRORB_WORKERS", "1"))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_convergence_case, jobs))
    else:
        results = [_convergence_case(job) for job in jobs]
    rows = [row for row, _ in results]
    if len(rows) >= 2:
        rows = rates(rows)
    export_csv(rows, os.path.join(cfg.out, "convergence.csv"))
    for (row, energy), n in zip(results, cfg.resolutions):
        export_csv(energy, os.path.join(cfg.out, f"energy_n{n}.csv"),
                   columns=ENERGY_COLUMNS)
    return rows


def run_cavity(cfg: RunConfig):
    os.makedirs(cfg.out, exist_ok=True)
    prob = _build_problem(cfg)
    sym, nonsym = cfg.solver_cfgs()
    n = cfg.resolutions[-1]
    scheme = ProjectionScheme(prob, n, sym_cfg=sym, nonsym_cfg=nonsym)
    trace = []

    def on_step(sch, state, row):
        trace.append({"step": state.step, "time": state.time,
                      "residual": steady_state_residual(state)})

    state, energy, snaps = scheme.run(
        cfg.dt_for(n), cfg.t_end, snapshot_times=cfg.snapshot_times,
        steady_tol=cfg.steady_tol, init_mode=cfg.init_mode, on_step=on_step)
    export_csv([r.__dict__ | {"composite": r.composite} for r in energy],
               os.path.join(cfg.out, "energy.csv"), columns=ENERGY_COLUMNS)
    export_csv(trace, os.path.join(cfg.out, "steady.csv"))
    export_vtk({"u": state.u, "p": state.p, "w": state.w, "theta": state.th},
               scheme.mesh, os.path.join(cfg.out, "cavity_final.vtk"))
    for t, fields in snaps:
        export_vtk(fields, scheme.mesh,
                   os.path.join(cfg.out, f"cavity_t{t:g}.vtk"))
    print(f"cavity: Ra={prob.rayleigh:g}, stopped at t={state.time:.4f} "
          f"with steady residual {trace[-1]['residual']:.3e}")
    return state, trace


def run_stir(cfg: RunConfig):
    os.makedirs(cfg.out, exist_ok=True)
    prob = _build_problem(cfg)
    sym, nonsym = cfg.solver_cfgs()
    n = cfg.resolutions[-1]
    scheme = ProjectionScheme(prob, n, sym_cfg=sym, nonsym_cfg=nonsym)
    bounds_trace = []

    def on_step(sch, state, row):
        phi = state.phi.phi.coeffs
        bounds_trace.append({"step": state.step, "time": state.time,
                             "phi_min": float(phi.min()),
                             "phi_max": float(phi.max()),
                             "u_sq": row.u_sq, "w_sq": row.w_sq_zeta})

    state, energy, snaps = scheme.run(
        cfg.dt_for(n), cfg.t_end, snapshot_times=cfg.snapshot_times,
        init_mode=cfg.init_mode, on_step=on_step)
    export_csv([r.__dict__ | {"composite": r.composite} for r in energy],
               os.path.join(cfg.out, "energy.csv"), columns=ENERGY_COLUMNS)
    export_csv(bounds_trace, os.path.join(cfg.out, "phi_bounds.csv"))
    for t, fields in snaps:
        export_vtk(fields, scheme.mesh, os.path.join(cfg.out, f"stir_t{t:g}.vtk"))
    final = {"u": state.u, "p": state.p, "w": state.w, "theta": state.th,
             "phi": state.phi.phi}
    export_vtk(final, scheme.mesh, os.path.join(cfg.out, "stir_final.vtk"))
    print(f"stir: reached t={state.time:.4f}, phi in "
          f"[{bounds_trace[-1]['phi_min']:.3f}, {bounds_trace[-1]['phi_max']:.3f}]")
    return state, bounds_trace


def _add_common_flags(sub):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--resolutions", help="comma-separated 1/h values")
    sub.add_argument("--dt", type=float, help="fixed time step")
    sub.add_argument("--T", type=float, dest="t_end", help="final time")
    sub.add_argument("--snapshot-times", dest="snapshot_times",
                     help="comma-separated output times")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="microrb",
        description="Decoupled projection FEM solver for micropolar "
                    "thermal convection (2D)")
    subs = parser.add_subparsers(dest="experiment")
    for name in EXPERIMENTS:
        _add_common_flags(subs.add_parser(name))

    args = parser.parse_args(argv)
    if args.experiment is None:
        parser.print_usage(sys.stderr)
        return 2

    overrides: dict = {}
    if args.out:
        overrides["out"] = args.out
    if args.resolutions:
        overrides["resolutions"] = _parse_value("resolutions", args.resolutions)
    if args.dt is not None:
        overrides["dt"] = args.dt
        overrides["dt_rule"] = "fixed"
    if args.t_end is not None:
        overrides["t_end"] = args.t_end
    if args.snapshot_times:
        overrides["snapshot_times"] = _parse_value("snapshot_times",
                                                   args.snapshot_times)
    try:
        cfg = parse_config(args.experiment, args.config, overrides)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    try:
        if cfg.experiment == "convergence":
            rows = run_convergence(cfg)
            for row in rows:
                print(f"1/h={row.one_over_h:3d}  u_l2={row.err_u_l2:.4e} "
                      f"u_h1={row.err_u_h1:.4e}  p={row.err_p_l2:.4e} "
                      f"w_l2={row.err_w_l2:.4e}  t_l2={row.err_t_l2:.4e}")
        elif cfg.experiment == "cavity":
            run_cavity(cfg)
        else:
            run_stir(cfg)
    except SolverFailure as exc:
        print(f"solver failure in {exc.step}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
