"""Forward state solver for controlled impulsive Volterra equations.

The state satisfies, between impulses,

    y(t) = y0(t) + sum_i  int_{tau_i}^{min(t, tau_{i+1})} f(t, s, y(s), a_i) ds
                 + g(t, taus before t, left limits before t, controls before t)

and is discretized with the implicit composite trapezoid rule on the doubled
quadrature grid. The kernel's dependence on the outer time t means the whole
integral is re-evaluated per node; cost is O(grid^2) callback work, which is
the intended desk scale. The implicit diagonal term at each node is resolved
by fixed-point iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .problem import (
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    as_control_array,
)

__all__ = [
    "SolveOptions",
    "SolverError",
    "solve_state",
    "evaluate_state_at",
    "jump_residual",
    "evaluate_cost",
]


@dataclass(frozen=True)
class SolveOptions:
    fp_tol: float = 1e-12
    fp_max_iter: int = 50

    def __post_init__(self):
        if not self.fp_tol > 0:
            raise ValueError("fp_tol must be positive")
        if self.fp_max_iter < 1:
            raise ValueError("fp_max_iter must be >= 1")


class SolverError(RuntimeError):
    """Fixed-point iteration failed to converge at a node.

    Signals a too-coarse mesh or a state-Jacobian bound too large for the
    step size.
    """

    def __init__(self, message: str, node_index: int, node_time: float):
        super().__init__(message)
        self.node_index = node_index
        self.node_time = node_time


def _jump_term(problem: ProblemSpec, schedule: ImpulseSchedule, levels: np.ndarray,
               left_lims: np.ndarray, t: float, count: int) -> np.ndarray:
    """g evaluated with the first `count` impulses; zero when count == 0."""
    n = problem.state_dim
    if count == 0 or problem.g is None:
        return np.zeros(n)
    return np.asarray(problem.g(
        t, schedule.times[:count], left_lims[:count], levels[:count + 1]
    ), dtype=float).reshape(n)


def _history_integral(problem: ProblemSpec, mesh: Mesh, levels: np.ndarray,
                      y: np.ndarray, t: float, p: int) -> np.ndarray:
    """Trapezoid of f(t, s, y(s), u(s)) over grid range [0..p], excluding the
    implicit diagonal term at node p itself (handled by the caller)."""
    n = problem.state_dim
    acc = np.zeros(n)
    if p == 0:
        return acc
    # global weights coincide with the range weights of [0..p] below the
    # moving endpoint, so only the diagonal needs special treatment
    w = mesh.weights
    M1 = mesh.points_per_interval + 1
    seg_p = mesh.seg[p]
    for j in range(seg_p + 1):
        lo = j * M1
        hi = min((j + 1) * M1, p)
        if hi <= lo:
            break
        sl = slice(lo, hi)
        vals = np.asarray(problem.f(t, mesh.times[sl], y[sl], levels[j]))
        acc = acc + w[sl] @ vals.reshape(hi - lo, n)
    return acc


def solve_state(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                mesh: Mesh, options: SolveOptions | None = None) -> PiecewiseTrajectory:
    """March the discrete state equation forward across the grid."""
    opts = options or SolveOptions()
    levels = as_control_array(controls, problem.control_dim)
    n = problem.state_dim
    P = mesh.n_grid
    times = mesh.times
    y = np.zeros((P, n))
    y0_all = np.asarray(problem.y0(times), dtype=float).reshape(P, n)
    left_lims = np.zeros((schedule.n_impulses + 1, n))
    eye = np.eye(n)

    for p in range(P):
        t = times[p]
        i = int(mesh.seg[p])
        base = y0_all[p] + _jump_term(problem, schedule, levels, left_lims, t, i)
        base = base + _history_integral(problem, mesh, levels, y, t, p)
        b_p = 0.0 if p == 0 else 0.5 * (times[p] - times[p - 1])
        if b_p == 0.0:
            y[p] = base
        else:
            # fixed point y = base + b_p f(t, t, y, a), accelerated by a
            # Newton correction with the supplied state Jacobian
            cur = y[p - 1].copy()
            a_i = levels[i]
            converged = False
            newton = None
            for _ in range(opts.fp_max_iter):
                f_diag = np.asarray(problem.f(
                    t, times[p:p + 1], cur[None, :], a_i)).reshape(n)
                delta = base + b_p * f_diag - cur
                if np.max(np.abs(delta)) <= opts.fp_tol:
                    cur = cur + delta
                    converged = True
                    break
                if newton is None:
                    fy = np.asarray(problem.f_y(
                        t, times[p:p + 1], cur[None, :], a_i)).reshape(n, n)
                    newton = (np.array([[1.0 / (1.0 - b_p * fy[0, 0])]])
                              if n == 1 else np.linalg.inv(eye - b_p * fy))
                cur = cur + newton @ delta
            if not converged:
                raise SolverError(
                    f"fixed-point iteration did not reach tol={opts.fp_tol} "
                    f"within {opts.fp_max_iter} steps at node {p} (t={t})",
                    node_index=p, node_time=t,
                )
            y[p] = cur
        M1 = mesh.points_per_interval + 1
        if (p + 1) % M1 == 0:  # left copy of tau_{i+1}: record the left limit
            left_lims[i] = y[p]

    return PiecewiseTrajectory(mesh=mesh, grid_values=y)


def evaluate_state_at(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                      traj: PiecewiseTrajectory, t: float, side: str = "left",
                      options: SolveOptions | None = None) -> np.ndarray:
    """Dense evaluation of the solved state at an arbitrary time.

    Re-assembles the state equation at t using the stored grid values for the
    history integral, so the result is consistent with the solver's own
    discretization to O(h^2). `side` selects the one-sided value when t
    coincides with an impulse instant.
    """
    mesh = traj.mesh
    opts = options or SolveOptions()
    levels = as_control_array(controls, problem.control_dim)
    n = problem.state_dim
    hits = np.nonzero(mesh.times == t)[0]
    if hits.size:
        return traj.grid_values[hits[0] if side == "left" else hits[-1]].copy()
    if not 0.0 <= t <= schedule.horizon:
        raise ValueError(f"t = {t} outside [0, {schedule.horizon}]")

    i = int(np.searchsorted(schedule.times, t))
    y = traj.grid_values
    base = np.asarray(problem.y0(np.array([t])), dtype=float).reshape(n)
    base = base + _jump_term(problem, schedule, levels, traj.left_limits, t, i)
    M1 = mesh.points_per_interval + 1
    for j in range(i):
        sl = mesh.segment_slice(j)
        w = mesh.range_weights(sl.start, sl.stop - 1)
        vals = np.asarray(problem.f(t, mesh.times[sl], y[sl], levels[j]))
        base = base + np.tensordot(w, vals, axes=(0, 0))
    # partial interval [tau_i, t]: grid points below t plus the endpoint t
    lo = i * M1
    q = lo + int(np.searchsorted(mesh.times[mesh.segment_slice(i)], t)) - 1
    s_aug = np.concatenate([mesh.times[lo:q + 1], [t]])
    dt = np.diff(s_aug)
    w_aug = np.zeros(len(s_aug))
    w_aug[:-1] += 0.5 * dt
    w_aug[1:] += 0.5 * dt
    vals = np.asarray(problem.f(t, mesh.times[lo:q + 1], y[lo:q + 1], levels[i]))
    base = base + np.tensordot(w_aug[:-1], vals, axes=(0, 0))
    b_t = w_aug[-1]
    cur = y[q].copy()
    for _ in range(opts.fp_max_iter):
        f_diag = np.asarray(problem.f(t, np.array([t]), cur[None, :], levels[i])).reshape(n)
        nxt = base + b_t * f_diag
        if np.max(np.abs(nxt - cur)) <= opts.fp_tol:
            return nxt
        cur = nxt
    raise SolverError(
        f"dense evaluation fixed point stalled at t={t}", node_index=-1, node_time=t)


def jump_residual(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                  traj: PiecewiseTrajectory) -> np.ndarray:
    """Max-norm mismatch between each trajectory jump and its g-difference."""
    levels = as_control_array(controls, problem.control_dim)
    N = schedule.n_impulses
    out = np.zeros(N)
    left = traj.left_limits
    right = traj.right_limits
    for i in range(1, N + 1):
        t = schedule.times[i - 1]
        g_hi = _jump_term(problem, schedule, levels, left, t, i)
        g_lo = _jump_term(problem, schedule, levels, left, t, i - 1)
        out[i - 1] = np.max(np.abs((right[i - 1] - left[i - 1]) - (g_hi - g_lo)))
    return out


def evaluate_cost(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                  traj: PiecewiseTrajectory, mesh: Mesh | None = None) -> float:
    """Running cost by composite trapezoid plus the impulse/terminal cost."""
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    J = 0.0
    for i in range(mesh.n_intervals):
        sl = mesh.segment_slice(i)
        Fv = np.asarray(problem.F(mesh.times[sl], traj.grid_values[sl], levels[i]))
        J += float(np.dot(mesh.weights[sl], Fv))
    if problem.G is not None:
        J += float(problem.G(schedule.times, traj.left_limits, levels))
    return J
