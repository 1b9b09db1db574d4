"""Fractional-step solver for coupled visco-elasticity, phase field, diffusion, damage and heat."""

from .errors import ConsistencyFailure, DomainError, FracstepError, InvalidArgument, NumericFailure
from .geometry import Mesh, NodalField, grid_mesh, integrate_boundary, integrate_cell, interval_mesh
from .materials import BoundaryData, make_model, validate_model
from .minimizers import SolveOptions, brute_force_min, projected_newton, scalar_root
from .reports import CheckReport
from .stepper import Problem, SchemeParams, State, advance, initial_state, run, tau_admissible

__version__ = "0.1.0"

__all__ = [
    "BoundaryData",
    "CheckReport",
    "ConsistencyFailure",
    "DomainError",
    "FracstepError",
    "InvalidArgument",
    "Mesh",
    "NodalField",
    "NumericFailure",
    "Problem",
    "SchemeParams",
    "SolveOptions",
    "State",
    "advance",
    "brute_force_min",
    "grid_mesh",
    "initial_state",
    "integrate_boundary",
    "integrate_cell",
    "interval_mesh",
    "make_model",
    "projected_newton",
    "run",
    "scalar_root",
    "tau_admissible",
    "validate_model",
]
