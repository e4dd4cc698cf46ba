"""Boundary pressure/heat-flux control of time-dependent Boussinesq flow.

A desk-scale solver for thermal convection on triangulated rectangles with a
total-pressure condition on one boundary part and a heat-flux condition on
the other, plus adjoint-based gradients and a bang-bang boundary-control
optimiser.
"""

from .mesh import (GAMMA1, GAMMA2, Mesh, QuadratureRule, build_rectangle_mesh,
                   outward_normal, triangle_quadrature)
from .discretization import (Field, SpaceSet, build_spaces, estimate_coercivity,
                             normal_trace)
from .forward import (ControlTrajectory, ProblemSpec, SolverError, State,
                      StateTrajectory, constant_controls, energy_report,
                      evaluate_cost, project_initial, run, smallness_ratio,
                      step, zero_controls)
from .sensitivity import (AdjointTrajectory, LinearizedTrajectory,
                          SwitchingFields, discrete_gradient,
                          pairing_identity_gap, run_adjoint, run_linearized,
                          switching_fields)
from .control_opt import (OptimizationResult, bang_bang, bang_bang_violations,
                          fw_gap, optimize, project_admissible, vi_residual)
from .config import (ConfigError, RunConfig, build_problem, default_config,
                     load_config, parse_config)

__version__ = "0.1.0"
