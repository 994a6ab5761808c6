"""State sensitivities with respect to individual impulse instants.

For each impulse index j the derivative of the state with respect to tau_j
solves a linear impulsive Volterra equation on (tau_j, T] driven by a forcing
built from the kernel oscillation across the impulse, the jump aggregate's
explicit tau_j partial, and the total derivative of the pre-impulse left
limit. Everything lives on the doubled quadrature grid; values are zero (and
queries rejected) before tau_j, where causality makes the sensitivity vanish.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .linear import GammaArray, LinearKernel, TrajectoryKernel, build_gamma, \
    build_lambda, gamma_hat, solve_linear_forward
from .problem import (
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    as_control_array,
)

__all__ = [
    "VariationBundle",
    "oscillation",
    "total_derivative_Dj",
    "eta_j_grid",
    "eta_j",
    "eta_tilde_j",
    "state_variation",
    "variation_recursion_residual",
]


def oscillation(phi, i: int, schedule: ImpulseSchedule, traj: PiecewiseTrajectory,
                controls):
    """Two-sided difference of phi across impulse i.

    phi is called as phi(t, y, a); the left value pairs y(tau_i^-) with
    a_{i-1}, the right value y(tau_i^+) with a_i.
    """
    levels = np.atleast_2d(np.asarray(
        controls.levels if hasattr(controls, "levels") else controls, dtype=float))
    t = schedule.times[i - 1]
    y_minus = traj.left_limits[i - 1]
    y_plus = traj.right_limits[i - 1]
    return phi(t, y_minus, levels[i - 1]) - phi(t, y_plus, levels[i])


def total_derivative_Dj(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                        traj: PiecewiseTrajectory, j: int,
                        mesh: Optional[Mesh] = None) -> np.ndarray:
    """Total derivative of the left limit y(tau_j^-) with respect to tau_j.

    Collects the forcing derivative, the kernel value at the moving upper
    integration limit, the integral of the kernel's outer-time partial, and
    the jump aggregate's explicit time-slot partial (its lists just before
    tau_j do not contain tau_j itself).
    """
    mesh = mesh or traj.mesh
    n = problem.state_dim
    levels = as_control_array(controls, problem.control_dim)
    tau = schedule.times[j - 1]
    Lj = mesh.left_index(j)
    y_minus = traj.grid_values[Lj]

    out = np.zeros(n)
    if problem.y0_dot is not None:
        out += np.asarray(problem.y0_dot(np.array([tau]))).reshape(n)
    out += np.asarray(problem.f(
        tau, np.array([tau]), y_minus[None, :], levels[j - 1])).reshape(n)
    if problem.f_t1 is not None:
        w = mesh.range_weights(0, Lj)
        M1 = mesh.points_per_interval + 1
        for c in range(j):
            lo, hi = c * M1, min((c + 1) * M1, Lj + 1)
            vals = np.asarray(problem.f_t1(
                tau, mesh.times[lo:hi], traj.grid_values[lo:hi], levels[c]))
            out += np.tensordot(w[lo:hi], vals.reshape(hi - lo, n), axes=(0, 0))
    if problem.g_t is not None and j >= 2:
        out += np.asarray(problem.g_t(
            tau, schedule.times[:j - 1], traj.left_limits[:j - 1], levels[:j]
        )).reshape(n)
    return out


def eta_j_grid(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
               traj: PiecewiseTrajectory, Dj: np.ndarray, j: int) -> np.ndarray:
    """Forcing of the sensitivity equation on the grid; zero before tau_j.

    eta_j(t) = f(t, tau_j, y(tau_j^-), a_{j-1}) - f(t, tau_j, y(tau_j^+), a_j)
             + dg/dtau_j (t) + dg/dy_j (t) . Dj          for t > tau_j.
    """
    mesh = traj.mesh
    n = problem.state_dim
    levels = as_control_array(controls, problem.control_dim)
    tau = schedule.times[j - 1]
    Rj = mesh.right_index(j)
    P = mesh.n_grid
    out = np.zeros((P, n))
    t_arr = mesh.times[Rj:]
    y_minus = traj.left_limits[j - 1]
    y_plus = traj.right_limits[j - 1]
    f_minus = np.asarray(problem.f(t_arr, tau, y_minus, levels[j - 1]))
    f_plus = np.asarray(problem.f(t_arr, tau, y_plus, levels[j]))
    out[Rj:] = f_minus.reshape(-1, n) - f_plus.reshape(-1, n)
    if problem.g is not None:
        M1 = mesh.points_per_interval + 1
        for c in range(j, mesh.n_intervals):
            sl = slice(max(Rj, c * M1), (c + 1) * M1)
            ts = mesh.times[sl]
            args = (schedule.times[:c], traj.left_limits[:c], levels[:c + 1])
            if problem.g_tau is not None:
                out[sl] += np.asarray(problem.g_tau(ts, *args, j)).reshape(-1, n)
            if problem.g_y is not None:
                gy = np.asarray(problem.g_y(ts, *args, j)).reshape(-1, n, n)
                out[sl] += gy @ Dj
    return out


def eta_j(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
          traj: PiecewiseTrajectory, Dj: np.ndarray, j: int, t: float,
          side: str = "left") -> np.ndarray:
    """Point evaluation of the sensitivity forcing at a grid time t > tau_j."""
    grid = eta_j_grid(problem, schedule, controls, traj, Dj, j)
    idx = traj.mesh.grid_index_of(t, side=side)
    if t <= schedule.times[j - 1]:
        raise ValueError(f"eta_{j} undefined at t = {t} <= tau_{j}")
    return grid[idx]


def eta_tilde_j(eta: np.ndarray, lam_grid: np.ndarray, gam: GammaArray,
                schedule: ImpulseSchedule, mesh: Mesh, j: int) -> np.ndarray:
    """Lift the sensitivity forcing through the impulse couplings.

    Adds, for every later impulse chain, the coupling coefficient times the
    forcing's left limits; contributions from impulses at or before tau_j
    vanish because the forcing is zero there, so the global lift specializes
    itself to the sub-horizon automatically. The chain sums include the
    single-step (identity) path, without which a lone later impulse would
    decouple entirely.
    """
    eta = np.asarray(eta, dtype=float)
    N = lam_grid.shape[1]
    out = eta.copy()
    if N == 0:
        return out
    ghat = gamma_hat(gam)[1:N + 2, 1:N + 1][:N]  # (N, N, n, n): i rows, ell cols
    C = np.einsum("piab,ilbc->plac", lam_grid, ghat)
    eta_left = np.stack([eta[mesh.left_index(l)] for l in range(1, N + 1)])
    out += np.einsum("plab,lb->pa", C, eta_left)
    return out


@dataclass(frozen=True)
class VariationBundle:
    """Sensitivity of the state to one impulse instant, on t > tau_j."""

    j: int
    Dj: np.ndarray            # (n,) total derivative of y(tau_j^-)
    eta: np.ndarray           # (P, n) forcing
    eta_tilde: np.ndarray     # (P, n) lifted forcing
    djy: np.ndarray           # (P, n) state sensitivity, zero before tau_j
    left_limits: dict         # ell -> d y(tau_ell^-)/d tau_j for ell > j
    valid_from: int           # first grid index of the domain (right copy of tau_j)
    mesh: Mesh

    def value_at(self, t: float, side: str = "left") -> np.ndarray:
        idx = self.mesh.grid_index_of(t, side=side)
        if idx < self.valid_from:
            raise ValueError(
                f"sensitivity to tau_{self.j} undefined at t = {t} (before the impulse)")
        return self.djy[idx]


def state_variation(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                    traj: PiecewiseTrajectory, j: int,
                    mesh: Optional[Mesh] = None,
                    kernel: Optional[LinearKernel] = None,
                    gam: Optional[GammaArray] = None) -> VariationBundle:
    """Solve the sensitivity equation for impulse j by direct forward march."""
    mesh = mesh or traj.mesh
    kernel = kernel or TrajectoryKernel(problem, schedule, controls, traj)
    if gam is None:
        gam = build_gamma(build_lambda(problem, schedule, controls, traj))
    Dj = total_derivative_Dj(problem, schedule, controls, traj, j, mesh)
    eta = eta_j_grid(problem, schedule, controls, traj, Dj, j)
    eta_t = eta_tilde_j(eta, kernel.lam, gam, schedule, mesh, j)
    djy = solve_linear_forward(eta, kernel, schedule, mesh)
    left = {l: djy[mesh.left_index(l)]
            for l in range(j + 1, schedule.n_impulses + 2)}
    return VariationBundle(j=j, Dj=Dj, eta=eta, eta_tilde=eta_t, djy=djy,
                           left_limits=left, valid_from=mesh.right_index(j),
                           mesh=mesh)


def variation_recursion_residual(bundle: VariationBundle, kernel: LinearKernel,
                                 schedule: ImpulseSchedule) -> np.ndarray:
    """Residuals of the left-limit recursion at tau_ell for ell > j.

    Each left limit must reproduce the sensitivity equation evaluated at the
    corresponding left-copy row: forcing plus kernel integral plus the jump
    couplings against earlier left limits.
    """
    mesh = bundle.mesh
    lam_grid = kernel.lam
    out = []
    for l in range(bundle.j + 1, schedule.n_impulses + 2):
        Ll = mesh.left_index(l)
        acc = bundle.eta[Ll].copy()
        w = mesh.range_weights(0, Ll)
        row = kernel.row(Ll)
        acc += np.einsum("q,qab,qb->a", w, row, bundle.djy[:Ll + 1])
        for i in range(1, int(mesh.seg[Ll]) + 1):
            acc += lam_grid[Ll, i - 1] @ bundle.djy[mesh.left_index(i)]
        out.append(float(np.max(np.abs(bundle.djy[Ll] - acc))))
    return np.asarray(out)
