"""2D finite-element solver for micropolar thermal convection using a
second-order, linear, fully decoupled pressure-projection scheme."""

from .fem import (FeFunction, FeSpace, QuadratureRule, build_space,
                  default_quadrature, eval_at_quadrature, interpolate,
                  shape_eval)
from .mesh import Mesh, build_structured_rect, mesh_diameter
from .problems import (PassiveScalarState, ProblemSpec, cavity_2d,
                       manufactured_2d, step_scalar, stirring_2d)
from .scheme import (BoundaryConditions, EnergyRow, FieldBc, PhysicalParams,
                     ProjectionScheme, SchemeState, SolverFailure)
from .sparse import (SolverConfig, SparseMatrix, apply_dirichlet,
                     from_triplets, project_zero_mean, solve, spmv)

__all__ = [
    "BoundaryConditions", "EnergyRow", "FeFunction", "FeSpace", "FieldBc",
    "Mesh", "PassiveScalarState", "PhysicalParams", "ProblemSpec",
    "ProjectionScheme", "QuadratureRule", "SchemeState", "SolverConfig",
    "SolverFailure", "SparseMatrix", "apply_dirichlet", "build_space",
    "build_structured_rect", "cavity_2d", "default_quadrature",
    "eval_at_quadrature", "from_triplets", "interpolate", "manufactured_2d",
    "mesh_diameter", "project_zero_mean", "solve", "spmv", "step_scalar",
    "stirring_2d",
]

__version__ = "0.1.0"
