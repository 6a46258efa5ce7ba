"""Residual minimizing finite elements for elliptic equations in
nondivergence form, with guaranteed maximum norm error bounds.

The solver pipeline: build a mesh (`mesh`), a C1 rectangular or
discontinuous triangular space (`spaces`), assemble the residual and
boundary data of the benchmark problem (`pde`, `assembly`), solve the
constrained quadratic program (`optimize`), and bound the error / drive
adaptivity (`adapt`).  `cli` wraps the four benchmark studies.
"""

from .adapt import (DiscreteSolution, EstimateReport, afem_loop, dorfler_mark,
                    gub, refinement_indicators)
from .assembly import (assemble_constraints, assemble_least_squares,
                       assemble_residual, assemble_stabilization,
                       boundary_misfit, residual_per_cell,
                       stabilization_per_cell)
from .cli import (RunConfig, StudyRow, error_norms, fit_rate, main,
                  read_study_csv, run, strong_bc_demo, write_study_csv)
from .mesh import (Domain, Mesh, build_initial_mesh, export_mesh,
                   refine_adaptive, refine_uniform)
from .optimize import QpSolution, QuadraticProgram, solve_qp, solve_spd
from .pde import (ProblemSpec, abp_constant, make_lshape_poisson,
                  make_problem, problem_registry)
from .spaces import build_space, eval_function, interpolate_bfs

__version__ = "0.1.0"

__all__ = [
    "DiscreteSolution", "Domain", "EstimateReport", "Mesh", "ProblemSpec",
    "QpSolution", "QuadraticProgram", "RunConfig", "StudyRow", "abp_constant",
    "afem_loop", "assemble_constraints", "assemble_least_squares",
    "assemble_residual", "assemble_stabilization", "boundary_misfit",
    "build_initial_mesh", "build_space", "dorfler_mark", "error_norms",
    "eval_function", "export_mesh", "fit_rate", "gub", "interpolate_bfs",
    "main", "make_lshape_poisson", "make_problem", "problem_registry",
    "read_study_csv", "refine_adaptive", "refine_uniform",
    "refinement_indicators", "residual_per_cell", "run", "solve_qp",
    "solve_spd", "stabilization_per_cell", "strong_bc_demo", "write_study_csv",
]
