"""Bingham flow in thin domains with rough periodic boundaries.

The package solves the full variational inequality on the thin domain,
the periodic cell problems defining the nonlinear mobility map, and the
macroscopic Darcy law of the homogenized limit, and compares the two
through discrete periodic unfolding.
"""
__version__ = "0.1.0"

from .errors import (ConfigError, ExtrapolationError, FieldMismatchError, H2ViolationError, MeshError,
                     NonConvergenceError, ParameterError, PartialTableError, ProfileError, ThinBinghamError,
                     ThresholdAboveRangeError)
from .geometry import (CellMesh, DomainMesh, RoughProfile, ThinDomainSpec, build_cell_mesh, build_domain_mesh,
                       eval_profile)
from .vi import (BinghamProblem, FluidParams, SolverOptions, VISolution, energy_residual, rigid_zones,
                 solve_bingham)
from .unfolding import UnfoldedField, unfold, unfold_all, unfold_gradient
from .homogenization import (DarcyOptions, MacroForcing, MobilityTable, build_mobility_table, eval_mobility,
                             limit_inequality_defect, reconstruct_limit, solve_cell, solve_darcy, yield_threshold)
from .harness import ExperimentConfig, RunReport, run_convergence, run_verify

__all__ = [
    "__version__", "ThinBinghamError", "ProfileError", "MeshError", "H2ViolationError", "FieldMismatchError",
    "ParameterError", "NonConvergenceError", "ThresholdAboveRangeError", "PartialTableError", "ExtrapolationError",
    "ConfigError", "RoughProfile", "ThinDomainSpec", "CellMesh", "DomainMesh", "build_cell_mesh",
    "build_domain_mesh", "eval_profile", "FluidParams", "SolverOptions", "BinghamProblem", "VISolution",
    "solve_bingham", "energy_residual", "rigid_zones", "UnfoldedField", "unfold", "unfold_all", "unfold_gradient",
    "MacroForcing", "MobilityTable", "DarcyOptions", "solve_cell", "yield_threshold", "build_mobility_table",
    "eval_mobility", "solve_darcy", "reconstruct_limit", "limit_inequality_defect", "ExperimentConfig", "RunReport",
    "run_convergence", "run_verify",
]
