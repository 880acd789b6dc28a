"""Guaranteed inf-sup stability certificates for 2D second-order FEM problems.

The pipeline assembles a Lagrange discretization of a second-order problem
satisfying a Gårding inequality, computes the solution-bound constant theta_h
and the equilibrated-flux residual constant rho_h from two discrete singular
value problems, and combines them with the worst-cell projection penalty into
a guaranteed lower bound gamma_h on the inf-sup constant.  A positive gamma_h
certifies well-posedness with stability constant 1/gamma_h.
"""

from .certify import (Certificate, CertifyError, certify,
                      discrete_infsup_oracle, efficiency_diagnostics, gamma_h,
                      run_certification, t_coercivity_check)
from .equilibrate import (EquilibrationError, FluxReconstruction,
                          build_patch_operators, compute_rho, dump_flux,
                          reconstruct_flux)
from .fespace import (BrokenSpace, FeSystem, LagrangeSpace, assemble,
                      project_pi_h, verify_poincare_sample)
from .mesh import (Mesh, MeshError, VertexPatch, build_patches,
                   generate_unit_square, load_mesh, refine_uniform, save_mesh,
                   shape_data)
from .operator import OperatorError, SolveHandle, compute_theta, solve_ph
from .problem import (GardingWeights, ProblemSpec, RegionCoefficients,
                      garding_check, helmholtz_default_weights, kfrak,
                      load_config, loads_config, patch_constants, wavespeed,
                      worst_cell)

__version__ = "0.1.0"

__all__ = [
    "Certificate", "CertifyError", "certify", "discrete_infsup_oracle",
    "efficiency_diagnostics", "gamma_h", "run_certification",
    "t_coercivity_check", "EquilibrationError", "FluxReconstruction",
    "build_patch_operators", "compute_rho", "dump_flux", "reconstruct_flux",
    "BrokenSpace", "FeSystem", "LagrangeSpace", "assemble", "project_pi_h",
    "verify_poincare_sample", "Mesh", "MeshError", "VertexPatch",
    "build_patches", "generate_unit_square", "load_mesh", "refine_uniform",
    "save_mesh", "shape_data", "OperatorError", "SolveHandle", "compute_theta",
    "solve_ph", "GardingWeights", "ProblemSpec", "RegionCoefficients",
    "garding_check", "helmholtz_default_weights", "kfrak", "load_config",
    "loads_config", "patch_constants", "wavespeed", "worst_cell",
]
