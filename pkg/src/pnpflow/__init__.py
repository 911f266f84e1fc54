"""Structure-preserving transport solver for 1D Poisson-Nernst-Planck systems.

Each time step advances the ion densities by solving a convex
minimization over (densities, momenta, potential) subject to the
discrete transport balance and the potential equation, which preserves
mass exactly, keeps densities positive, and dissipates the free energy.
"""

from .assembly import (ConstraintSystem, State, StateLayout,
                       assemble_poisson_rows, assemble_transport_rows,
                       build_constraint_system, feasible_start,
                       recover_momentum, solve_poisson)
from .driver import (ConvergenceRow, Diagnostics, RunConfig, RunResult,
                     advance_step, convergence_study, reference_minimizer,
                     run, select_delta)
from .errors import (ConfigurationError, MassMismatchError,
                     SingularSystemError, SolverError)
from .functional import (EnergyBreakdown, ObjectiveParams, eval_energy,
                         eval_gradient, eval_objective,
                         interp_identity_residuals)
from .mesh import Grid1D, build_grid, divergence_dh, face_average
from .model import (BoundaryEnd, PnpModel, SampledModel, SpeciesSpec,
                    sample, validate)
from .newton import NewtonParams, NewtonReport, newton_solve
from .optimizer import (PgParams, PgReport, Projector, build_projector,
                        line_search, pg_solve, project_step_direction)

__version__ = "0.1.0"

__all__ = [
    "BoundaryEnd", "ConfigurationError", "ConstraintSystem",
    "ConvergenceRow", "Diagnostics", "EnergyBreakdown", "Grid1D",
    "MassMismatchError", "NewtonParams", "NewtonReport", "ObjectiveParams",
    "PgParams", "PgReport",
    "PnpModel", "Projector", "RunConfig", "RunResult", "SampledModel",
    "SingularSystemError", "SolverError", "SpeciesSpec", "State",
    "StateLayout", "advance_step", "assemble_poisson_rows",
    "assemble_transport_rows", "build_constraint_system", "build_grid",
    "build_projector", "convergence_study", "divergence_dh", "eval_energy",
    "eval_gradient", "eval_objective", "face_average", "feasible_start",
    "interp_identity_residuals", "line_search", "newton_solve", "pg_solve",
    "project_step_direction", "recover_momentum", "reference_minimizer",
    "run", "sample", "select_delta", "solve_poisson", "validate",
]
