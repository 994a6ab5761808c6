"""Analytic cost gradients: co-states, Hamiltonians, impulse-time and
control-level derivatives, stationarity residuals.

The impulse-time derivative of the cost combines the Hamiltonian oscillation
across the impulse, the co-state-weighted explicit jump partials, the direct
terminal-cost partials, and the propagation of the sensitivity forcing into
every later left limit through resolvent rows. The control derivative pairs
one backward adjoint pass against the per-level forcing, so a single solve
serves all N+1 levels.

Backward quantities are computed by direct triangular marches of their
defining discrete equations (see linear.py); resolvent rows at impulse left
limits are solved on truncated horizons with the collapsed chain forcing,
which keeps them second-order accurate up to and including the endpoint.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .linear import (
    GammaArray,
    LinearKernel,
    TrajectoryKernel,
    adjoint_residual,
    build_gamma,
    build_lambda,
    gamma_hat,
    solve_adjoint,
)
from .problem import (
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    as_control_array,
)
from .solver import evaluate_cost
from .variations import eta_j_grid, eta_tilde_j, total_derivative_Dj

__all__ = [
    "CostateP",
    "CostatePhi",
    "GradientReport",
    "GradTauResult",
    "costate_p",
    "costate_p_residual",
    "hamiltonian_h",
    "resolvent_rows_at_impulses",
    "resolvent_row_residual",
    "grad_tau",
    "stationarity_tau_residual",
    "costate_phi",
    "costate_phi_residual",
    "grad_a",
    "variational_inequality_residual",
    "compute_gradient_report",
]


# ---------------------------------------------------------------------------
# running-cost gradient grids


def _F_y_grid(problem: ProblemSpec, mesh: Mesh, traj: PiecewiseTrajectory,
              levels: np.ndarray) -> np.ndarray:
    n = problem.state_dim
    out = np.zeros((mesh.n_grid, n))
    for c in range(mesh.n_intervals):
        sl = mesh.segment_slice(c)
        out[sl] = np.asarray(problem.F_y(
            mesh.times[sl], traj.grid_values[sl], levels[c])).reshape(-1, n)
    return out


def _G_y_rows(problem: ProblemSpec, schedule: ImpulseSchedule,
              traj: PiecewiseTrajectory, levels: np.ndarray) -> np.ndarray:
    """(N+2, n) rows dG/dy_ell, 1-based over ell = 1..N+1."""
    N = schedule.n_impulses
    n = traj.state_dim
    rows = np.zeros((N + 2, n))
    if problem.G_y is not None:
        left = traj.left_limits
        for l in range(1, N + 2):
            rows[l] = np.asarray(problem.G_y(
                schedule.times, left, levels, l)).reshape(n)
    return rows


# ---------------------------------------------------------------------------
# co-state p


@dataclass(frozen=True)
class CostateP:
    """Row-vector co-state pairing running-cost sensitivity with the state.

    The same grid function serves every impulse index: restricting the
    backward solve to a later start reproduces the same values, so only the
    global function is stored. chain[j] is the co-state's impulse-coupling
    coefficient, the weight with which a forcing's left limit at tau_j enters
    any paired functional; it vanishes without jump couplings.
    """

    values: np.ndarray  # (P, n)
    chain: np.ndarray   # (N+2, n), 1-based over impulse slots
    mesh: Mesh


def costate_p(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
              traj: PiecewiseTrajectory, mesh: Optional[Mesh] = None,
              kernel: Optional[LinearKernel] = None,
              gam: Optional[GammaArray] = None) -> CostateP:
    """Backward solve of the adjoint equation forced by the running cost."""
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    eta = _F_y_grid(problem, mesh, traj, levels)
    z, M = solve_adjoint(eta, kernel, gam, schedule, mesh)
    return CostateP(values=z, chain=M, mesh=mesh)


def costate_p_residual(p: CostateP, problem: ProblemSpec, schedule: ImpulseSchedule,
                       controls, traj: PiecewiseTrajectory,
                       kernel: Optional[LinearKernel] = None,
                       gam: Optional[GammaArray] = None) -> float:
    """Residual of the co-state's Hamiltonian-form backward equation."""
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    eta = _F_y_grid(problem, p.mesh, traj, levels)
    return adjoint_residual(p.values, eta, kernel, gam, schedule, p.mesh)


def hamiltonian_h(problem: ProblemSpec, traj: PiecewiseTrajectory, p,
                  t: float, y: np.ndarray, a: np.ndarray,
                  mesh: Optional[Mesh] = None) -> float:
    """Running cost plus co-state-weighted future dynamics at (t, y, a).

    t must be a mesh time; the co-state integral runs over (t, T].
    """
    mesh = mesh or traj.mesh
    p_vals = p.values if isinstance(p, CostateP) else np.asarray(p)
    idx = mesh.grid_index_of(t, side="right")
    y = np.asarray(y, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    val = float(np.asarray(problem.F(np.array([t]), y[None, :], a)).reshape(()))
    t_arr = mesh.times[idx:]
    fv = np.asarray(problem.f(t_arr, t, y, a)).reshape(len(t_arr), -1)
    w = mesh.range_weights(idx, mesh.n_grid - 1)
    val += float(np.einsum("k,kn,kn->", w, p_vals[idx:], fv))
    return val


# ---------------------------------------------------------------------------
# resolvent rows at impulse left limits


def _row_forcing(kernel: LinearKernel, gam: GammaArray, mesh: Mesh,
                 l: int) -> np.ndarray:
    """Collapsed chain forcing sum_{j<=l} GammaHat_{l j} K(tau_j^-, .)."""
    rows = kernel.impulse_rows()  # (N+1, P, n, n)
    ghat = gamma_hat(gam)
    out = np.einsum("ab,pbc->pac", ghat[l, l], rows[l - 1])
    for j in range(1, l):
        out += np.einsum("ab,pbc->pac", ghat[l, j], rows[j - 1])
    return out


def resolvent_rows_at_impulses(problem: ProblemSpec, schedule: ImpulseSchedule,
                               controls, traj: PiecewiseTrajectory,
                               mesh: Optional[Mesh] = None,
                               kernel: Optional[LinearKernel] = None,
                               gam: Optional[GammaArray] = None) -> dict:
    """Resolvent rows R(tau_ell^-, .) for ell = 1..N+1, solved directly.

    Each row satisfies the backward Hamiltonian-form equation on its
    truncated horizon (0, tau_ell); solving that equation directly keeps the
    rows second-order accurate pointwise, whereas extracting them from the
    global resolvent kernel object agrees only to quadrature accuracy.
    """
    mesh = mesh or traj.mesh
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    out = {}
    for l in range(1, schedule.n_impulses + 2):
        forcing = _row_forcing(kernel, gam, mesh, l)
        z, _ = solve_adjoint(forcing, kernel, gam, schedule, mesh,
                             p_end=mesh.left_index(l))
        out[l] = z
    return out


def resolvent_row_residual(rows: dict, problem: ProblemSpec,
                           schedule: ImpulseSchedule, controls,
                           traj: PiecewiseTrajectory,
                           kernel: Optional[LinearKernel] = None,
                           gam: Optional[GammaArray] = None) -> float:
    """Worst residual of the rows' backward equations across all ell."""
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    mesh = traj.mesh
    worst = 0.0
    for l, z in rows.items():
        forcing = _row_forcing(kernel, gam, mesh, l)
        worst = max(worst, adjoint_residual(
            z, forcing, kernel, gam, schedule, mesh, p_end=mesh.left_index(l)))
    return worst


# ---------------------------------------------------------------------------
# impulse-time gradient


@dataclass(frozen=True)
class GradTauResult:
    values: np.ndarray      # (N,)
    breakdown: dict         # five labelled (N,) term arrays summing to values


def _g_partial_dot_p(problem: ProblemSpec, schedule: ImpulseSchedule,
                     levels: np.ndarray, traj: PiecewiseTrajectory,
                     p_vals: np.ndarray, Dj: np.ndarray, j: int) -> float:
    """Integral over (tau_j, T] of p(t) . [dg/dtau_j(t) + dg/dy_j(t) Dj]."""
    if problem.g is None:
        return 0.0
    mesh = traj.mesh
    n = problem.state_dim
    Rj = mesh.right_index(j)
    M1 = mesh.points_per_interval + 1
    grid = np.zeros((mesh.n_grid, n))
    for c in range(j, mesh.n_intervals):
        sl = slice(max(Rj, c * M1), (c + 1) * M1)
        ts = mesh.times[sl]
        args = (schedule.times[:c], traj.left_limits[:c], levels[:c + 1])
        if problem.g_tau is not None:
            grid[sl] += np.asarray(problem.g_tau(ts, *args, j)).reshape(-1, n)
        if problem.g_y is not None:
            gy = np.asarray(problem.g_y(ts, *args, j)).reshape(-1, n, n)
            grid[sl] += gy @ Dj
    w = mesh.range_weights(Rj, mesh.n_grid - 1)
    return float(np.einsum("k,kn,kn->", w, p_vals[Rj:], grid[Rj:]))


def grad_tau(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
             traj: PiecewiseTrajectory, mesh: Optional[Mesh] = None,
             kernel: Optional[LinearKernel] = None,
             gam: Optional[GammaArray] = None,
             p: Optional[CostateP] = None,
             rows: Optional[dict] = None) -> GradTauResult:
    """Impulse-time derivatives of the cost with a per-term breakdown.

    Terms per impulse j: Hamiltonian oscillation; co-state against explicit
    jump partials; co-state impulse chains against the forcing's left limits
    at intermediate impulses (vanishes when no impulse lies strictly between
    tau_j and T); direct terminal-cost time partial; terminal-cost left-limit
    partial against the total derivative; propagation into later left limits
    through the lifted forcing and resolvent rows. The returned values are
    the exact sum of the breakdown arrays.
    """
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    if p is None:
        p = costate_p(problem, schedule, controls, traj, mesh, kernel, gam)
    if rows is None:
        rows = resolvent_rows_at_impulses(problem, schedule, controls, traj,
                                          mesh, kernel, gam)
    N = schedule.n_impulses
    G_rows = _G_y_rows(problem, schedule, traj, levels)
    terms = {k: np.zeros(N) for k in
             ("hamiltonian_oscillation", "costate_jump_partials",
              "costate_chain", "terminal_time_partial",
              "terminal_left_limit", "propagation")}
    for j in range(1, N + 1):
        tau = schedule.times[j - 1]
        y_minus = traj.left_limits[j - 1]
        y_plus = traj.right_limits[j - 1]
        h_minus = hamiltonian_h(problem, traj, p, tau, y_minus, levels[j - 1], mesh)
        h_plus = hamiltonian_h(problem, traj, p, tau, y_plus, levels[j], mesh)
        terms["hamiltonian_oscillation"][j - 1] = h_minus - h_plus

        Dj = total_derivative_Dj(problem, schedule, controls, traj, j, mesh)
        terms["costate_jump_partials"][j - 1] = _g_partial_dot_p(
            problem, schedule, levels, traj, p.values, Dj, j)

        eta = eta_j_grid(problem, schedule, controls, traj, Dj, j)
        # the co-state's impulse chains pair against the raw forcing's left
        # limits at impulses strictly between tau_j and T
        for l in range(j + 1, N + 1):
            terms["costate_chain"][j - 1] += float(
                p.chain[l] @ eta[mesh.left_index(l)])

        if problem.G_tau is not None:
            terms["terminal_time_partial"][j - 1] = float(problem.G_tau(
                schedule.times, traj.left_limits, levels, j))
        terms["terminal_left_limit"][j - 1] = float(G_rows[j] @ Dj)

        if problem.G_y is not None:
            eta_t = eta_tilde_j(eta, kernel.lam, gam, schedule, mesh, j)
            Rj = mesh.right_index(j)
            for l in range(j + 1, N + 2):
                Ll = mesh.left_index(l)
                w = mesh.range_weights(Rj, Ll)
                prop = eta_t[Ll] + np.einsum(
                    "k,kab,kb->a", w, rows[l][Rj:Ll + 1], eta_t[Rj:Ll + 1])
                terms["propagation"][j - 1] += float(G_rows[l] @ prop)
    values = sum(terms.values())
    return GradTauResult(values=values, breakdown=terms)


def stationarity_tau_residual(grad) -> float:
    """Max-norm of the impulse-time gradient: zero at interior stationary
    schedules."""
    values = grad.values if isinstance(grad, GradTauResult) else np.asarray(grad)
    return float(np.max(np.abs(values))) if np.size(values) else 0.0


# ---------------------------------------------------------------------------
# co-state phi and control gradient


@dataclass(frozen=True)
class CostatePhi:
    """Control-variation co-state and its impulse point coefficients.

    values = phi is the negative of the adjoint state z that pairs against
    the control forcing densities; point_coeffs[j] pairs against the forcing's
    left limit at tau_j (1-based, slot N+1 = terminal row of the impulse cost).
    """

    values: np.ndarray        # (P, n) phi = -z
    point_coeffs: np.ndarray  # (N+2, n) coefficients of the z-pairing
    mesh: Mesh


def costate_phi(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                traj: PiecewiseTrajectory, mesh: Optional[Mesh] = None,
                kernel: Optional[LinearKernel] = None,
                gam: Optional[GammaArray] = None,
                p: Optional[CostateP] = None,
                rows: Optional[dict] = None) -> CostatePhi:
    """Assemble the control co-state by superposition.

    z = p + sum_ell dG/dy_ell . R(tau_ell^-, .), each piece from its own
    direct solve; the chain coefficients are then frozen by the descending
    recursion against the coupling blocks. phi = -z matches the sign
    convention in which the control gradient subtracts the phi pairings.
    """
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    if p is None:
        p = costate_p(problem, schedule, controls, traj, mesh, kernel, gam)
    if rows is None:
        rows = resolvent_rows_at_impulses(problem, schedule, controls, traj,
                                          mesh, kernel, gam)
    N = schedule.n_impulses
    n = problem.state_dim
    G_rows = _G_y_rows(problem, schedule, traj, levels)
    z = p.values.copy()
    for l in range(1, N + 2):
        if np.any(G_rows[l]):
            z += np.einsum("b,pba->pa", G_rows[l], rows[l])
    lam_grid = kernel.lam
    M = np.zeros((N + 2, n))
    M[N + 1] = G_rows[N + 1]
    for j in range(N, 0, -1):
        Rj = mesh.right_index(j)
        w = mesh.range_weights(Rj, mesh.n_grid - 1)
        kappa = np.einsum("k,kn,knm->m", w, z[Rj:], lam_grid[Rj:, j - 1])
        M[j] = G_rows[j] + kappa
        for l in range(j + 1, N + 2):
            M[j] += M[l] @ lam_grid[mesh.left_index(l), j - 1]
    return CostatePhi(values=-z, point_coeffs=M, mesh=mesh)


def costate_phi_residual(phi: CostatePhi, problem: ProblemSpec,
                         schedule: ImpulseSchedule, controls,
                         traj: PiecewiseTrajectory,
                         kernel: Optional[LinearKernel] = None,
                         gam: Optional[GammaArray] = None) -> float:
    """Residual of the control co-state's backward integral equation."""
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    mesh = phi.mesh
    z = -phi.values
    eta = _F_y_grid(problem, mesh, traj, levels)
    G_rows = _G_y_rows(problem, schedule, traj, levels)
    return adjoint_residual(z, eta, kernel, gam, schedule, mesh,
                            point_rows=G_rows)


def _control_forcing_grid(problem: ProblemSpec, schedule: ImpulseSchedule,
                          levels: np.ndarray, traj: PiecewiseTrajectory,
                          i: int) -> np.ndarray:
    """(P, n, m) forcing of the state sensitivity to control level a_i."""
    mesh = traj.mesh
    n, m = problem.state_dim, problem.control_dim
    P = mesh.n_grid
    out = np.zeros((P, n, m))
    Ri = mesh.right_index(i)
    Li1 = mesh.left_index(i + 1)
    if problem.f_a is not None:
        for p_idx in range(Ri, P):
            hi = min(p_idx, Li1)
            w = mesh.range_weights(Ri, hi)
            vals = np.asarray(problem.f_a(
                mesh.times[p_idx], mesh.times[Ri:hi + 1],
                traj.grid_values[Ri:hi + 1], levels[i])).reshape(-1, n, m)
            out[p_idx] = np.tensordot(w, vals, axes=(0, 0))
    if problem.g_a is not None:
        M1 = mesh.points_per_interval + 1
        for c in range(i, mesh.n_intervals):
            sl = slice(max(Ri, c * M1), (c + 1) * M1)
            ts = mesh.times[sl]
            args = (schedule.times[:c], traj.left_limits[:c], levels[:c + 1])
            out[sl] += np.asarray(problem.g_a(ts, *args, i)).reshape(-1, n, m)
    return out


def grad_a(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
           traj: PiecewiseTrajectory, phi: Optional[CostatePhi] = None,
           mesh: Optional[Mesh] = None) -> np.ndarray:
    """Control-level derivatives of the cost, one row per level.

    Assembles, per level: the direct running-cost partial; the direct
    impulse/terminal-cost partial; the adjoint density paired against the
    iterated kernel partial (evaluated as an iterated trapezoid, inner over
    the source time, outer over the grid); the adjoint density against the
    jump aggregate's control partial; and the point coefficients against the
    forcing's left limits at later impulses.
    """
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    if phi is None:
        phi = costate_phi(problem, schedule, controls, traj, mesh)
    N = schedule.n_impulses
    n, m = problem.state_dim, problem.control_dim
    z = -phi.values
    M = phi.point_coeffs
    out = np.zeros((N + 1, m))
    for i in range(N + 1):
        Ri = mesh.right_index(i)
        Li1 = mesh.left_index(i + 1)
        w_seg = mesh.range_weights(Ri, Li1)
        Fa = np.asarray(problem.F_a(
            mesh.times[Ri:Li1 + 1], traj.grid_values[Ri:Li1 + 1],
            levels[i])).reshape(-1, m)
        row = np.tensordot(w_seg, Fa, axes=(0, 0))
        if problem.G_a is not None:
            row = row + np.asarray(problem.G_a(
                schedule.times, traj.left_limits, levels, i)).reshape(m)
        forcing = _control_forcing_grid(problem, schedule, levels, traj, i)
        w_all = mesh.range_weights(0, mesh.n_grid - 1)
        row = row + np.einsum("p,pn,pnm->m", w_all, z, forcing)
        for j in range(i + 1, N + 2):
            row = row + M[j] @ forcing[mesh.left_index(j)]
        out[i] = row
    return out


def variational_inequality_residual(grad_a_values: np.ndarray, controls,
                                    control_boxes: np.ndarray) -> float:
    """Projected-gradient fixed-point gap for the boxed control problem.

    Zero exactly when every admissible variation increases the cost to first
    order: the box structure makes the fixed-point characterization of the
    variational inequality computable by a clamp.
    """
    a = np.atleast_2d(np.asarray(
        controls.levels if hasattr(controls, "levels") else controls, dtype=float))
    g = np.asarray(grad_a_values, dtype=float).reshape(a.shape)
    boxes = np.asarray(control_boxes, dtype=float)
    if boxes.ndim == 2:
        boxes = np.broadcast_to(boxes, a.shape + (2,))
    stepped = np.clip(a - g, boxes[..., 0], boxes[..., 1])
    return float(np.max(np.abs(a - stepped)))


# ---------------------------------------------------------------------------
# one-stop report


@dataclass
class GradientReport:
    dJ_dtau: np.ndarray
    dJ_da: np.ndarray
    tau_stationarity: float
    a_vi_residual: float
    breakdown: dict
    J: float
    fd_dtau: Optional[np.ndarray] = None
    fd_da: Optional[np.ndarray] = None


def compute_gradient_report(problem: ProblemSpec, schedule: ImpulseSchedule,
                            controls, traj: PiecewiseTrajectory,
                            mesh: Optional[Mesh] = None,
                            with_fd: bool = False,
                            fd_h_tau: float = 1e-4,
                            fd_h_a: float = 1e-5) -> GradientReport:
    """Gradients, residuals and (optionally) finite-difference columns."""
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = TrajectoryKernel(problem, schedule, controls, traj)
    gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    p = costate_p(problem, schedule, controls, traj, mesh, kernel, gam)
    rows = resolvent_rows_at_impulses(problem, schedule, controls, traj,
                                      mesh, kernel, gam)
    gt = grad_tau(problem, schedule, controls, traj, mesh, kernel, gam, p, rows)
    phi = costate_phi(problem, schedule, controls, traj, mesh, kernel, gam,
                      p, rows)
    ga = grad_a(problem, schedule, controls, traj, phi, mesh)
    boxes = problem.boxes_for(schedule.n_impulses + 1)
    report = GradientReport(
        dJ_dtau=gt.values,
        dJ_da=ga,
        tau_stationarity=stationarity_tau_residual(gt),
        a_vi_residual=variational_inequality_residual(ga, levels, boxes),
        breakdown=gt.breakdown,
        J=evaluate_cost(problem, schedule, levels, traj, mesh),
    )
    if with_fd:
        from .optimize import fd_gradient  # local import to avoid a cycle
        fd_tau, fd_a = fd_gradient(problem, schedule, levels, mesh,
                                   h_tau=fd_h_tau, h_a=fd_h_a)
        report.fd_dtau = fd_tau
        report.fd_da = fd_a
    return report
