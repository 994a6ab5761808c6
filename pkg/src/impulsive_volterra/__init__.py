"""Controlled impulsive Volterra integral equations: forward solver, analytic
impulse-time and control-level gradients, and projected-gradient schedule
optimization."""

from .problem import (
    ControlVector,
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    build_mesh,
    control_at,
    control_at_left,
    control_at_right,
    validate_schedule,
)
from .solver import (
    SolveOptions,
    SolverError,
    evaluate_cost,
    evaluate_state_at,
    jump_residual,
    solve_state,
)
from .linear import (
    ArrayKernel,
    DiscreteResolvent,
    GammaArray,
    LambdaArray,
    TrajectoryKernel,
    adjoint_residual,
    build_gamma,
    build_lambda,
    discrete_resolvent,
    forward_residual,
    gamma_by_paths,
    lift_kernel,
    resolvent_identity_residual,
    solve_adjoint,
    solve_linear_forward,
)
from .variations import (
    VariationBundle,
    eta_j,
    eta_j_grid,
    eta_tilde_j,
    oscillation,
    state_variation,
    total_derivative_Dj,
    variation_recursion_residual,
)
from .gradients import (
    CostateP,
    CostatePhi,
    GradientReport,
    GradTauResult,
    compute_gradient_report,
    costate_p,
    costate_p_residual,
    costate_phi,
    costate_phi_residual,
    grad_a,
    grad_tau,
    hamiltonian_h,
    resolvent_row_residual,
    resolvent_rows_at_impulses,
    stationarity_tau_residual,
    variational_inequality_residual,
)
from .ode import (
    OdeProblemSpec,
    PsiCostate,
    RhoMatrix,
    lift_ode_problem,
    ode_grad_tau,
    ode_stationarity,
    psi_costate,
    psi_residual,
    rho_matrix,
    rho_residual,
)
from .optimize import (
    OptimizationTrace,
    OptimizeOptions,
    StallError,
    fd_gradient,
    grid_search,
    optimize,
    project_controls,
    project_schedule,
)
from .problems import PROBLEM_NAMES, BuiltinProblem, get_problem, list_problems

__version__ = "0.1.0"
