"""Impulsive controlled ODEs as a special case of the Volterra framework.

An impulsive ODE (state derivative f(t, y, u) between impulses, jump map at
each impulse) lifts into the general integral form with a kernel that ignores
the outer time slot and a jump aggregate that sums the per-impulse increments.
Because the kernel is outer-time independent, the co-state collapses to a
single backward running integral (psi) and the resolvent rows to cumulative
integrals (rho), which shortens the gradient assembly considerably.

The jump map can be given in replacement form, y(tau^+) = I(tau, y(tau^-), a),
or increment form, y(tau^+) = y(tau^-) + I(...); the lift always works with
increments internally.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .gradients import CostateP, costate_p, resolvent_rows_at_impulses
from .linear import GammaArray, LinearKernel, TrajectoryKernel, build_gamma, \
    build_lambda, gamma_hat
from .problem import (
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    as_control_array,
)
from .variations import eta_j_grid, eta_tilde_j, total_derivative_Dj

__all__ = [
    "OdeProblemSpec",
    "PsiCostate",
    "RhoMatrix",
    "lift_ode_problem",
    "psi_costate",
    "psi_residual",
    "rho_matrix",
    "rho_residual",
    "ode_grad_tau",
    "ode_stationarity",
]


@dataclass(frozen=True)
class OdeProblemSpec:
    """Impulsive controlled ODE data.

    f_ode(t, y, a) is the state derivative; jump is the jump map with partials
    jump_tau (n,), jump_y (n, n), jump_a (n, m). jump_convention selects how
    the map is read: "replacement" means y(tau^+) = jump(...), "increment"
    means y(tau^+) = y(tau^-) + jump(...).
    """

    state_dim: int
    control_dim: int
    horizon: float
    y0: np.ndarray
    f_ode: Callable
    f_ode_y: Callable
    f_ode_a: Callable
    F: Callable
    F_y: Callable
    F_a: Callable
    jump: Optional[Callable] = None
    jump_tau: Optional[Callable] = None
    jump_y: Optional[Callable] = None
    jump_a: Optional[Callable] = None
    jump_convention: str = "increment"
    G: Optional[Callable] = None
    G_tau: Optional[Callable] = None
    G_y: Optional[Callable] = None
    G_a: Optional[Callable] = None
    control_boxes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.jump_convention not in ("increment", "replacement"):
            raise ValueError("jump_convention must be 'increment' or 'replacement'")
        object.__setattr__(self, "y0",
                           np.asarray(self.y0, dtype=float).reshape(self.state_dim))

    def increment(self, tau: float, y: np.ndarray, a: np.ndarray) -> np.ndarray:
        """Jump increment regardless of the stored convention."""
        val = np.asarray(self.jump(tau, y, a), dtype=float).reshape(self.state_dim)
        if self.jump_convention == "replacement":
            val = val - np.asarray(y, dtype=float).reshape(self.state_dim)
        return val

    def increment_y(self, tau, y, a) -> np.ndarray:
        n = self.state_dim
        val = np.asarray(self.jump_y(tau, y, a), dtype=float).reshape(n, n)
        if self.jump_convention == "replacement":
            val = val - np.eye(n)
        return val


def _tile_rows(vals: np.ndarray, k: int) -> np.ndarray:
    vals = np.asarray(vals, dtype=float)
    if vals.shape[0] == 1 and k > 1:
        vals = np.broadcast_to(vals, (k,) + vals.shape[1:])
    return vals


def lift_ode_problem(ode: OdeProblemSpec) -> ProblemSpec:
    """Embed the impulsive ODE into the general integral-equation model.

    The lifted kernel evaluates the ODE right-hand side at the inner time
    only, so its outer-time partial vanishes; the jump aggregate sums the
    increments of the impulses fired so far and is independent of the
    evaluation time.
    """
    n, m = ode.state_dim, ode.control_dim

    def _k(t, s):
        t_len = np.size(np.atleast_1d(t))
        s_len = np.size(np.atleast_1d(s))
        return max(t_len, s_len)

    def y0(t):
        t = np.atleast_1d(t)
        return np.broadcast_to(ode.y0, (len(t), n)).copy()

    def y0_dot(t):
        t = np.atleast_1d(t)
        return np.zeros((len(t), n))

    def f(t, s, y, a):
        return _tile_rows(np.asarray(ode.f_ode(s, y, a)).reshape(-1, n), _k(t, s))

    def f_y(t, s, y, a):
        return _tile_rows(np.asarray(ode.f_ode_y(s, y, a)).reshape(-1, n, n), _k(t, s))

    def f_a(t, s, y, a):
        return _tile_rows(np.asarray(ode.f_ode_a(s, y, a)).reshape(-1, n, m), _k(t, s))

    def f_t1(t, s, y, a):
        return np.zeros((_k(t, s), n))

    if ode.jump is not None:
        def g(t, taus, ys, a):
            total = np.zeros(n)
            for q in range(len(taus)):
                total += ode.increment(taus[q], ys[q], a[q])
            return total

        def g_t(t, taus, ys, a):
            t_arr = np.atleast_1d(t)
            out = np.zeros((len(t_arr), n))
            return out if np.ndim(t) else out[0]

        def g_tau(t, taus, ys, a, j):
            val = np.asarray(ode.jump_tau(
                taus[j - 1], ys[j - 1], a[j - 1]), dtype=float).reshape(n)
            t_arr = np.atleast_1d(t)
            out = np.broadcast_to(val, (len(t_arr), n)).copy()
            return out if np.ndim(t) else out[0]

        def g_y(t, taus, ys, a, j):
            val = ode.increment_y(taus[j - 1], ys[j - 1], a[j - 1])
            t_arr = np.atleast_1d(t)
            out = np.broadcast_to(val, (len(t_arr), n, n)).copy()
            return out if np.ndim(t) else out[0]

        def g_a(t, taus, ys, a, i):
            t_arr = np.atleast_1d(t)
            out = np.zeros((len(t_arr), n, m))
            if i + 1 <= len(taus):
                val = np.asarray(ode.jump_a(
                    taus[i], ys[i], a[i]), dtype=float).reshape(n, m)
                out[:] = val
            return out if np.ndim(t) else out[0]
    else:
        g = g_t = g_tau = g_y = g_a = None

    return ProblemSpec(
        state_dim=n, control_dim=m, horizon=ode.horizon,
        y0=y0, y0_dot=y0_dot,
        f=f, f_y=f_y, f_a=f_a, f_t1=f_t1,
        g=g, g_t=g_t, g_tau=g_tau, g_y=g_y, g_a=g_a,
        F=ode.F, F_y=ode.F_y, F_a=ode.F_a,
        G=ode.G, G_tau=ode.G_tau, G_y=ode.G_y, G_a=ode.G_a,
        control_boxes=ode.control_boxes,
    )


# ---------------------------------------------------------------------------
# psi: cumulative co-state


@dataclass(frozen=True)
class PsiCostate:
    """Backward cumulative integral of the co-state; zero at the horizon."""

    values: np.ndarray   # (P, n), psi(t) on the grid
    p: CostateP
    mesh: Mesh

    def at_right(self, i: int) -> np.ndarray:
        """psi(tau_i^+), i = 0..N (right copies of the impulse nodes)."""
        return self.values[self.mesh.right_index(i)]


def psi_costate(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                traj: PiecewiseTrajectory, mesh: Optional[Mesh] = None,
                kernel: Optional[LinearKernel] = None,
                gam: Optional[GammaArray] = None,
                p: Optional[CostateP] = None) -> PsiCostate:
    """Cumulative co-state for a lifted impulsive ODE problem."""
    mesh = mesh or traj.mesh
    if p is None:
        p = costate_p(problem, schedule, controls, traj, mesh, kernel, gam)
    psi = mesh.cumtrapz_backward(p.values)
    return PsiCostate(values=psi, p=p, mesh=mesh)


def psi_residual(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                 traj: PiecewiseTrajectory, psi: PsiCostate,
                 kernel: Optional[LinearKernel] = None,
                 gam: Optional[GammaArray] = None) -> float:
    """Residual of the backward differential form of the co-state equation.

    For outer-time-independent kernels the co-state must equal the running
    cost gradient plus psi (and the impulse chain coefficients) against the
    state Jacobian, node by node.
    """
    mesh = psi.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    n = problem.state_dim
    N = schedule.n_impulses
    lam_grid = kernel.lam
    ghat = gamma_hat(gam)
    Kd = kernel.diag()
    Fy = np.zeros((mesh.n_grid, n))
    for c in range(mesh.n_intervals):
        sl = mesh.segment_slice(c)
        Fy[sl] = np.asarray(problem.F_y(
            mesh.times[sl], traj.grid_values[sl], levels[c])).reshape(-1, n)
    kappa = np.zeros((N + 2, n))
    for i in range(1, N + 1):
        Ri = mesh.right_index(i)
        kappa[i] = psi.values[Ri] @ lam_grid[Ri, i - 1]
    M = np.zeros((N + 2, n))
    for j in range(1, N + 1):
        for i in range(j, N + 1):
            M[j] += kappa[i] @ ghat[i, j]
    worst = 0.0
    p_vals = psi.p.values
    for idx in range(mesh.n_grid):
        acc = Fy[idx] + psi.values[idx] @ Kd[idx]
        for j in range(1, N + 1):
            if mesh.left_index(j) > idx:
                acc += M[j] @ Kd[idx]
        worst = max(worst, float(np.max(np.abs(p_vals[idx] - acc))))
    return worst


# ---------------------------------------------------------------------------
# rho: cumulative resolvent rows


@dataclass(frozen=True)
class RhoMatrix:
    """Cumulative integrals of the resolvent rows, per terminal index.

    values[l] has entry p equal to the integral of the row for tau_l over
    [t_p, tau_l]; apart from that stop index the generating equation is the
    same for every l, which the overlap tests exercise.
    """

    values: dict  # l -> (P, n, n)
    rows: dict    # l -> (P, n, n) underlying resolvent rows
    mesh: Mesh

    def at_right(self, l: int, i: int) -> np.ndarray:
        """rho_l(tau_i^+)."""
        return self.values[l][self.mesh.right_index(i)]


def rho_matrix(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
               traj: PiecewiseTrajectory, mesh: Optional[Mesh] = None,
               kernel: Optional[LinearKernel] = None,
               gam: Optional[GammaArray] = None,
               rows: Optional[dict] = None) -> RhoMatrix:
    mesh = mesh or traj.mesh
    if rows is None:
        rows = resolvent_rows_at_impulses(problem, schedule, controls, traj,
                                          mesh, kernel, gam)
    values = {l: mesh.cumtrapz_backward(r) for l, r in rows.items()}
    return RhoMatrix(values=values, rows=rows, mesh=mesh)


def rho_residual(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                 traj: PiecewiseTrajectory, rho: RhoMatrix,
                 kernel: Optional[LinearKernel] = None,
                 gam: Optional[GammaArray] = None) -> float:
    """Residual of the backward equation generating the cumulative rows.

    Each row must equal (identity + rho + chain coefficients) against the
    state Jacobian on its domain, mirroring the truncated-horizon solves.
    """
    mesh = rho.mesh
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    n = problem.state_dim
    N = schedule.n_impulses
    lam_grid = kernel.lam
    ghat = gamma_hat(gam)
    Kd = kernel.diag()
    worst = 0.0
    for l, r in rho.rows.items():
        Ll = mesh.left_index(l)
        kappa = np.zeros((N + 2, n, n))
        for i in range(1, min(l, N + 1)):
            Ri = mesh.right_index(i)
            kappa[i] = rho.at_right(l, i) @ lam_grid[Ri, i - 1]
        M = np.zeros((N + 2, n, n))
        for j in range(1, N + 1):
            for i in range(j, N + 2):
                M[j] += kappa[i] @ ghat[i, j]
        for p in range(Ll + 1):
            coeff = np.zeros((n, n))
            for j in range(1, l + 1):
                if mesh.left_index(j) >= p:
                    coeff += ghat[l, j]
            coeff += rho.values[l][p]
            for j in range(1, N + 1):
                if p < mesh.left_index(j) < Ll:
                    coeff += M[j]
            acc = coeff @ Kd[p]
            worst = max(worst, float(np.max(np.abs(r[p] - acc))))
    return worst


# ---------------------------------------------------------------------------
# gradient along the shortened path


def ode_grad_tau(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                 traj: PiecewiseTrajectory, psi: PsiCostate, rho: RhoMatrix,
                 gam: Optional[GammaArray] = None,
                 mesh: Optional[Mesh] = None) -> np.ndarray:
    """Impulse-time gradient using the cumulative co-state and rows.

    Exploits the outer-time independence of the lifted kernel: co-state
    integrals collapse to psi evaluations, the jump partials are constant in
    time, and the propagation quadratures telescope into differences of the
    cumulative rows across the piecewise-constant lifted forcing.
    """
    mesh = mesh or traj.mesh
    levels = as_control_array(controls, problem.control_dim)
    kernel = TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    N = schedule.n_impulses
    n = problem.state_dim
    out = np.zeros(N)
    left = traj.left_limits
    lam_grid = kernel.lam
    ghat = gamma_hat(gam)
    # co-state impulse chains built from psi: kappa_i = psi(tau_i^+) lambda_i
    kappa = np.zeros((N + 2, n))
    for i in range(1, N + 1):
        Ri = mesh.right_index(i)
        kappa[i] = psi.values[Ri] @ lam_grid[Ri, i - 1]
    chain = np.zeros((N + 2, n))
    for l in range(1, N + 1):
        for i in range(l, N + 1):
            chain[l] += kappa[i] @ ghat[i, l]
    for j in range(1, N + 1):
        tau = schedule.times[j - 1]
        Rj = mesh.right_index(j)
        psi_j = psi.values[Rj]
        y_minus = left[j - 1]
        y_plus = traj.right_limits[j - 1]

        def h(y, a):
            Fv = float(np.asarray(problem.F(
                np.array([tau]), y[None, :], a)).reshape(()))
            fv = np.asarray(problem.f(
                tau, np.array([tau]), y[None, :], a)).reshape(n)
            return Fv + float(psi_j @ fv)

        val = h(y_minus, levels[j - 1]) - h(y_plus, levels[j])

        Dj = total_derivative_Dj(problem, schedule, controls, traj, j, mesh)
        eta = eta_j_grid(problem, schedule, controls, traj, Dj, j)
        if problem.g is not None:
            args = (schedule.times[:j], left[:j], levels[:j + 1])
            jump_partial = np.asarray(problem.g_tau(tau, *args, j)).reshape(n) \
                if problem.g_tau is not None else np.zeros(n)
            if problem.g_y is not None:
                jump_partial = jump_partial + np.asarray(
                    problem.g_y(tau, *args, j)).reshape(n, n) @ Dj
            val += float(psi_j @ jump_partial)
        for l in range(j + 1, N + 1):
            val += float(chain[l] @ eta[mesh.left_index(l)])
        if problem.G_tau is not None:
            val += float(problem.G_tau(schedule.times, left, levels, j))
        if problem.G_y is not None:
            val += float(np.asarray(problem.G_y(
                schedule.times, left, levels, j)).reshape(n) @ Dj)
            eta_t = eta_tilde_j(eta, kernel.lam, gam, schedule, mesh, j)
            for l in range(j + 1, N + 2):
                Ll = mesh.left_index(l)
                prop = eta_t[Ll].copy()
                for c in range(j, l):
                    lo = max(Rj, mesh.right_index(c))
                    hi = min(Ll, mesh.left_index(c + 1))
                    seg_val = eta_t[lo]  # constant across the segment
                    prop += (rho.values[l][lo] - rho.values[l][hi]) @ seg_val
                val += float(np.asarray(problem.G_y(
                    schedule.times, left, levels, l)).reshape(n) @ prop)
        out[j - 1] = val
    return out


def ode_stationarity(grad: np.ndarray) -> float:
    """Max-norm of the impulse-time gradient for the ODE path."""
    return float(np.max(np.abs(grad))) if np.size(grad) else 0.0
