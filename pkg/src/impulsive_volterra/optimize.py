"""Projected-gradient optimization of impulse schedules and control levels.

The decision vector stacks the impulse instants and the control levels; each
iteration takes a joint step along the analytic gradients, projects back onto
the feasible set (minimum-gap simplex for the schedule, boxes for the
controls), and backtracks until sufficient decrease holds. Fixed points of
the projected step are exactly the first-order stationary points: vanishing
time gradient on the interior schedule set, variational-inequality
fixed-point gap zero on the boxes.

Finite-difference gradients (full nonlinear re-solves) and a dense grid
search are provided as desk-scale oracles; neither enters the loop.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gradients import (
    compute_gradient_report,
    grad_a,
    grad_tau,
    stationarity_tau_residual,
    variational_inequality_residual,
)
from .problem import ImpulseSchedule, Mesh, ProblemSpec, as_control_array, \
    build_mesh
from .solver import SolveOptions, evaluate_cost, solve_state

__all__ = [
    "OptimizeOptions",
    "IterationRecord",
    "OptimizationTrace",
    "StallError",
    "fd_gradient",
    "project_schedule",
    "project_controls",
    "optimize",
    "grid_search",
]


@dataclass(frozen=True)
class OptimizeOptions:
    max_iters: int = 200
    step_init: float = 1.0
    shrink: float = 0.5
    sufficient_decrease: float = 1e-4
    tol_tau: float = 1e-4
    tol_a: float = 1e-4
    mesh_points: int = 200
    min_gap: Optional[float] = None
    mode: str = "joint"  # or "alternating", for term-by-term debugging
    max_shrinks: int = 60

    def __post_init__(self):
        if not (0.0 < self.shrink < 1.0):
            raise ValueError("shrink factor must lie in (0, 1)")
        for name in ("max_iters", "step_init", "sufficient_decrease",
                     "tol_tau", "tol_a", "max_shrinks"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mode not in ("joint", "alternating"):
            raise ValueError("mode must be 'joint' or 'alternating'")


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    tau: np.ndarray
    a: np.ndarray
    J: float
    grad_tau_norm: float
    vi_residual: float
    step: float
    mesh_points: int
    gap_active: bool


@dataclass
class OptimizationTrace:
    records: list = field(default_factory=list)
    converged: bool = False
    final_schedule: Optional[ImpulseSchedule] = None
    final_controls: Optional[np.ndarray] = None
    final_report: object = None

    def costs(self) -> np.ndarray:
        return np.array([r.J for r in self.records])


class StallError(RuntimeError):
    """Line search shrank past its budget without sufficient decrease."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


def fd_gradient(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                mesh: Mesh, h_tau: float = 1e-4, h_a: float = 1e-5,
                options: Optional[SolveOptions] = None):
    """Central-difference cost gradients via full nonlinear re-solves.

    Oracle only: each probe rebuilds the mesh around the perturbed schedule
    so every evaluation is the same discretization seen by the optimizer.
    """
    levels = as_control_array(controls, problem.control_dim)
    N = schedule.n_impulses
    M = mesh.points_per_interval
    taus = schedule.times

    def cost_at(t_vec, a_mat) -> float:
        sched = ImpulseSchedule(t_vec, schedule.horizon, schedule.min_gap)
        msh = build_mesh(sched, M)
        traj = solve_state(problem, sched, a_mat, msh, options)
        return evaluate_cost(problem, sched, a_mat, traj, msh)

    pad = np.concatenate(([0.0], taus, [schedule.horizon]))
    for j in range(1, N + 1):
        margin = min(pad[j] - pad[j - 1], pad[j + 1] - pad[j])
        if margin <= h_tau + schedule.min_gap:
            raise ValueError(
                f"schedule too close to its constraints for h_tau={h_tau} at "
                f"impulse {j}")

    fd_tau = np.zeros(N)
    for j in range(N):
        up, dn = taus.copy(), taus.copy()
        up[j] += h_tau
        dn[j] -= h_tau
        fd_tau[j] = (cost_at(up, levels) - cost_at(dn, levels)) / (2 * h_tau)
    fd_a = np.zeros_like(levels)
    for i in range(levels.shape[0]):
        for k in range(levels.shape[1]):
            up, dn = levels.copy(), levels.copy()
            up[i, k] += h_a
            dn[i, k] -= h_a
            fd_a[i, k] = (cost_at(taus, up) - cost_at(taus, dn)) / (2 * h_a)
    return fd_tau, fd_a


def _pav_nondecreasing(y: np.ndarray) -> np.ndarray:
    """Pool-adjacent-violators projection onto nondecreasing sequences."""
    y = np.asarray(y, dtype=float)
    sums = []
    counts = []
    for v in y:
        sums.append(v)
        counts.append(1)
        while len(sums) > 1 and sums[-2] / counts[-2] > sums[-1] / counts[-1]:
            s, c = sums.pop(), counts.pop()
            sums[-1] += s
            counts[-1] += c
    out = np.empty_like(y)
    pos = 0
    for s, c in zip(sums, counts):
        out[pos:pos + c] = s / c
        pos += c
    return out


def project_schedule(times, min_gap: float, horizon: float) -> np.ndarray:
    """Euclidean projection onto the minimum-gap schedule set.

    Shifting the i-th instant by -i*gap turns the gap constraints into plain
    monotonicity with box ends, solved by pool-adjacent-violators followed by
    a clamp. Idempotent.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    N = len(times)
    if N == 0:
        return times.copy()
    hi = horizon - (N + 1) * min_gap
    if hi < 0:
        raise ValueError(
            f"infeasible schedule constraints: {N} impulses with gap {min_gap} "
            f"do not fit in horizon {horizon}")
    shifted = times - min_gap * np.arange(1, N + 1)
    iso = _pav_nondecreasing(shifted)
    iso = np.clip(iso, 0.0, hi)
    return iso + min_gap * np.arange(1, N + 1)


def project_controls(levels, control_boxes) -> np.ndarray:
    """Componentwise clamp onto the admissible boxes. Idempotent."""
    a = np.atleast_2d(np.asarray(levels, dtype=float))
    boxes = np.asarray(control_boxes, dtype=float)
    if boxes.ndim == 2:
        boxes = np.broadcast_to(boxes, a.shape + (2,))
    return np.clip(a, boxes[..., 0], boxes[..., 1])


def _evaluate(problem, sched, levels, M, solve_opts):
    mesh = build_mesh(sched, M)
    traj = solve_state(problem, sched, levels, mesh, solve_opts)
    return mesh, traj, evaluate_cost(problem, sched, levels, traj, mesh)


def optimize(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
             options: Optional[OptimizeOptions] = None,
             solve_options: Optional[SolveOptions] = None) -> OptimizationTrace:
    """Joint (or alternating) projected-gradient descent on (tau, a)."""
    opts = options or OptimizeOptions()
    gap = opts.min_gap if opts.min_gap is not None else schedule.min_gap
    levels = project_controls(as_control_array(controls, problem.control_dim),
                              problem.boxes_for(schedule.n_impulses + 1))
    taus = project_schedule(schedule.times, gap, schedule.horizon)
    sched = ImpulseSchedule(taus, schedule.horizon, gap)
    boxes = problem.boxes_for(sched.n_impulses + 1)
    M = opts.mesh_points

    trace = OptimizationTrace()
    step = opts.step_init
    mesh, traj, J = _evaluate(problem, sched, levels, M, solve_options)
    for it in range(opts.max_iters):
        gt = grad_tau(problem, sched, levels, traj, mesh)
        ga = grad_a(problem, sched, levels, traj, mesh=mesh)
        res_tau = stationarity_tau_residual(gt)
        res_a = variational_inequality_residual(ga, levels, boxes)
        probe = project_schedule(sched.times - gt.values, gap, sched.horizon)
        gap_active = bool(sched.n_impulses) and bool(np.any(np.abs(
            np.diff(np.concatenate(([0.0], probe, [sched.horizon])))
            <= gap * (1 + 1e-12))))
        trace.records.append(IterationRecord(
            iteration=it, tau=sched.times.copy(), a=levels.copy(), J=J,
            grad_tau_norm=res_tau, vi_residual=res_a, step=step,
            mesh_points=M, gap_active=gap_active))
        if res_tau <= opts.tol_tau and res_a <= opts.tol_a:
            trace.converged = True
            break

        move_tau = opts.mode == "joint" or it % 2 == 0
        move_a = opts.mode == "joint" or it % 2 == 1
        step = min(opts.step_init, step / opts.shrink)
        accepted = False
        displacement = np.inf
        shrinks = 0
        while shrinks <= opts.max_shrinks:
            cand_tau = sched.times - step * gt.values if move_tau else sched.times
            cand_a = levels - step * ga if move_a else levels
            cand_tau = project_schedule(cand_tau, gap, sched.horizon)
            cand_a = project_controls(cand_a, boxes)
            displacement = (np.sum((cand_tau - sched.times) ** 2)
                            + np.sum((cand_a - levels) ** 2))
            if displacement == 0.0:
                break
            cand_sched = ImpulseSchedule(cand_tau, sched.horizon, gap)
            cand_mesh, cand_traj, cand_J = _evaluate(
                problem, cand_sched, cand_a, M, solve_options)
            if cand_J <= J - (opts.sufficient_decrease / step) * displacement:
                sched, levels = cand_sched, cand_a
                mesh, traj, J = cand_mesh, cand_traj, cand_J
                accepted = True
                break
            step *= opts.shrink
            shrinks += 1
        if not accepted:
            if displacement == 0.0:
                if opts.mode == "alternating":
                    continue  # the other block may still move
                # projected fixed point with active constraints: boundary event
                break
            report = compute_gradient_report(problem, sched, levels, traj, mesh)
            raise StallError(
                f"line search stalled after {shrinks} shrinks at iteration {it}",
                report=report)

    trace.final_schedule = sched
    trace.final_controls = levels
    trace.final_report = compute_gradient_report(problem, sched, levels, traj,
                                                 mesh)
    return trace


def grid_search(problem: ProblemSpec, horizon: float, tau_grid: np.ndarray,
                a_grids, min_gap: float, M: int,
                solve_options: Optional[SolveOptions] = None):
    """Dense brute-force minimization oracle over a product grid.

    tau_grid: (T1,) candidate instants for a single impulse, or a list of
    per-impulse candidate arrays whose product is filtered by the gap
    constraints. a_grids: list of per-level candidate arrays (scalar control).
    Returns (best_J, best_tau, best_a, J_table) with J_table indexed by the
    product grid.
    """
    if isinstance(tau_grid, np.ndarray) and tau_grid.ndim == 1:
        tau_sets = [tau_grid]
    else:
        tau_sets = list(tau_grid)
    a_sets = [np.atleast_1d(g) for g in a_grids]
    tau_shapes = tuple(len(g) for g in tau_sets)
    a_shapes = tuple(len(g) for g in a_sets)
    J_table = np.full(tau_shapes + a_shapes, np.nan)
    best = (np.inf, None, None)
    for tau_idx in np.ndindex(*tau_shapes):
        taus = np.array([g[i] for g, i in zip(tau_sets, tau_idx)])
        try:
            sched = ImpulseSchedule(taus, horizon, min_gap)
        except ValueError:
            continue  # gap constraints exclude this grid point
        mesh = build_mesh(sched, M)
        for a_idx in np.ndindex(*a_shapes):
            a = np.array([[g[i]] for g, i in zip(a_sets, a_idx)])
            traj = solve_state(problem, sched, a, mesh, solve_options)
            J = evaluate_cost(problem, sched, a, traj, mesh)
            J_table[tau_idx + a_idx] = J
            if J < best[0]:
                best = (J, taus.copy(), a.copy())
    return best[0], best[1], best[2], J_table
