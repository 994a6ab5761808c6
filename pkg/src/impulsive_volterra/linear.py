"""Linear impulsive Volterra machinery.

Covers the block coupling array of jump Jacobians, its increasing-path sums,
the jump-free lifted kernel, the discrete resolvent kernel, and direct
triangular solvers for the forward and adjoint linear impulsive equations.

Conventions
-----------
Block arrays over impulse indices are stored 1-based: ``blocks[i, j]`` is the
(n, n) block for impulse pair (i, j), rows/columns 0 unused. Index N+1 refers
to the horizon T treated as a pseudo-impulse with zero jump; the terminal row
exists so that terminal-cost sensitivities can propagate through impulse
coupling.

All time integrals are composite trapezoid on the doubled quadrature grid.
The resolvent kernel object solves the trapezoid fixed-point identity
exactly; the forward/adjoint solvers march their defining equations directly
(triangular in time), so their discrete residuals vanish to roundoff. The
resolvent-representation of a solution agrees with the direct march to
quadrature accuracy O(h^2), not exactly; tests treat the representation as a
consistency oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Callable, Optional

import numpy as np

from .problem import (
    ImpulseSchedule,
    Mesh,
    PiecewiseTrajectory,
    ProblemSpec,
    as_control_array,
)

__all__ = [
    "LambdaArray",
    "GammaArray",
    "DiscreteResolvent",
    "LinearKernel",
    "TrajectoryKernel",
    "ArrayKernel",
    "build_lambda",
    "build_gamma",
    "gamma_by_paths",
    "gamma_hat",
    "lift_kernel",
    "discrete_resolvent",
    "resolvent_identity_residual",
    "solve_linear_forward",
    "solve_adjoint",
    "forward_residual",
    "adjoint_residual",
]


# ---------------------------------------------------------------------------
# block arrays


@dataclass(frozen=True)
class LambdaArray:
    """Jump-coupling Jacobians lambda_j evaluated just before later impulses.

    blocks[i, j] (1-based, j < i <= N+1) is the Jacobian of the jump
    aggregate's dependence on the j-th left limit, evaluated at t = tau_i^-
    (t = T^- for i = N+1). Strictly lower block triangular, hence nilpotent.
    """

    blocks: np.ndarray  # (N+2, N+2, n, n), slots 0 unused
    n_impulses: int
    state_dim: int

    def as_matrix(self) -> np.ndarray:
        """Flattened ((N+1)n, (N+1)n) block matrix over indices 1..N+1."""
        N1, n = self.n_impulses + 1, self.state_dim
        big = np.zeros((N1 * n, N1 * n))
        for i in range(1, N1 + 1):
            for j in range(1, i):
                big[(i - 1) * n:i * n, (j - 1) * n:j * n] = self.blocks[i, j]
        return big


@dataclass(frozen=True)
class GammaArray:
    """Sums of jump-coupling products along increasing impulse-index chains."""

    blocks: np.ndarray  # (N+2, N+2, n, n), slots 0 unused
    n_impulses: int
    state_dim: int


def build_lambda(problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                 traj: PiecewiseTrajectory) -> LambdaArray:
    """Evaluate the coupling blocks on a solved trajectory."""
    N = schedule.n_impulses
    n = problem.state_dim
    levels = as_control_array(controls, problem.control_dim)
    blocks = np.zeros((N + 2, N + 2, n, n))
    if problem.g_y is not None:
        left = traj.left_limits
        bounds = np.concatenate([schedule.times, [schedule.horizon]])
        for i in range(2, N + 2):
            count = i - 1  # impulses strictly before tau_i (or T when i=N+1)
            t = bounds[i - 1]
            for j in range(1, count + 1):
                blocks[i, j] = np.asarray(problem.g_y(
                    t, schedule.times[:count], left[:count], levels[:count + 1], j
                )).reshape(n, n)
    return LambdaArray(blocks=blocks, n_impulses=N, state_dim=n)


def build_gamma(lam: LambdaArray) -> GammaArray:
    """Path sums as the finite power series of the nilpotent coupling array."""
    N, n = lam.n_impulses, lam.state_dim
    big = lam.as_matrix()
    acc = np.zeros_like(big)
    power = np.eye(big.shape[0])
    for _ in range(N):
        power = power @ big
        acc += power
    blocks = np.zeros((N + 2, N + 2, n, n))
    for i in range(1, N + 2):
        for j in range(1, i):
            blocks[i, j] = acc[(i - 1) * n:i * n, (j - 1) * n:j * n]
    return GammaArray(blocks=blocks, n_impulses=N, state_dim=n)


def gamma_by_paths(lam: LambdaArray) -> GammaArray:
    """Path-enumeration construction of the same sums; oracle for build_gamma.

    Enumerates every increasing index chain j < k_1 < ... < k_a < i and sums
    the corresponding left-to-right products. Exponential in N, so guarded.
    """
    N, n = lam.n_impulses, lam.state_dim
    if N > 12:
        raise ValueError("path enumeration limited to N <= 12")
    blocks = np.zeros((N + 2, N + 2, n, n))
    B = lam.blocks
    for i in range(1, N + 2):
        for j in range(1, i):
            total = np.zeros((n, n))
            interior = range(j + 1, i)
            for r in range(0, i - j):
                for chain in combinations(interior, r):
                    idx = (i,) + tuple(reversed(chain)) + (j,)
                    prod = np.eye(n)
                    for a, b in zip(idx[:-1], idx[1:]):
                        prod = prod @ B[a, b]
                    total += prod
            blocks[i, j] = total
    return GammaArray(blocks=blocks, n_impulses=N, state_dim=n)


def gamma_hat(gamma: GammaArray) -> np.ndarray:
    """Path sums including the empty chain: identity on the block diagonal."""
    N, n = gamma.n_impulses, gamma.state_dim
    out = gamma.blocks.copy()
    for i in range(1, N + 2):
        out[i, i] = np.eye(n)
    return out


# ---------------------------------------------------------------------------
# kernel access


class LinearKernel:
    """Grid access to a Volterra kernel K(t, s) (s <= t) with jump couplings.

    lam[p, i-1] is the coupling Jacobian lambda_i at grid time t_p, zero for
    grid points at or before tau_i. impulse_rows()[j-1] is the kernel row
    K(tau_j^-, .) for j = 1..N+1 (j = N+1 is the T^- row), zero beyond the
    triangle.
    """

    def row(self, p: int) -> np.ndarray:  # (p+1, n, n)
        raise NotImplementedError

    def col(self, p: int) -> np.ndarray:  # (P-p, n, n): K(t_k, t_p), k >= p
        raise NotImplementedError

    def diag(self) -> np.ndarray:  # (P, n, n)
        raise NotImplementedError

    def impulse_rows(self) -> np.ndarray:  # (N+1, P, n, n)
        raise NotImplementedError

    @property
    def lam(self) -> np.ndarray:  # (P, N, n, n)
        raise NotImplementedError


class TrajectoryKernel(LinearKernel):
    """Kernel of the state equation linearized along a solved trajectory:
    K(t, s) = df/dy (t, s, y(s), u(s)), couplings from the jump aggregate."""

    def __init__(self, problem: ProblemSpec, schedule: ImpulseSchedule, controls,
                 traj: PiecewiseTrajectory):
        self.problem = problem
        self.schedule = schedule
        self.levels = as_control_array(controls, problem.control_dim)
        self.traj = traj
        self.mesh = traj.mesh
        self.n = problem.state_dim
        self._diag = None
        self._imp_rows = None
        self._lam = None

    def _fy_row(self, t: float, lo: int, hi: int) -> np.ndarray:
        """f_y(t, s, y(s), u(s)) for grid s-indices [lo..hi)."""
        mesh, n = self.mesh, self.n
        out = np.zeros((hi - lo, n, n))
        M1 = mesh.points_per_interval + 1
        j0, j1 = mesh.seg[lo], mesh.seg[hi - 1]
        for j in range(j0, j1 + 1):
            a = max(lo, j * M1)
            b = min(hi, (j + 1) * M1)
            if b <= a:
                continue
            vals = np.asarray(self.problem.f_y(
                t, mesh.times[a:b], self.traj.grid_values[a:b], self.levels[j]))
            out[a - lo:b - lo] = vals.reshape(b - a, n, n)
        return out

    def row(self, p: int) -> np.ndarray:
        return self._fy_row(self.mesh.times[p], 0, p + 1)

    def col(self, p: int) -> np.ndarray:
        mesh, n = self.mesh, self.n
        t_arr = mesh.times[p:]
        y_p = self.traj.grid_values[p]
        a_p = self.levels[mesh.seg[p]]
        vals = np.asarray(self.problem.f_y(t_arr, mesh.times[p], y_p, a_p))
        return vals.reshape(len(t_arr), n, n)

    def diag(self) -> np.ndarray:
        if self._diag is None:
            mesh, n = self.mesh, self.n
            out = np.zeros((mesh.n_grid, n, n))
            for j in range(mesh.n_intervals):
                sl = mesh.segment_slice(j)
                vals = np.asarray(self.problem.f_y(
                    mesh.times[sl], mesh.times[sl],
                    self.traj.grid_values[sl], self.levels[j]))
                out[sl] = vals.reshape(sl.stop - sl.start, n, n)
            self._diag = out
        return self._diag

    def impulse_rows(self) -> np.ndarray:
        if self._imp_rows is None:
            mesh, n = self.mesh, self.n
            N = self.schedule.n_impulses
            rows = np.zeros((N + 1, mesh.n_grid, n, n))
            for j in range(1, N + 2):
                L = mesh.left_index(j)
                rows[j - 1, :L + 1] = self._fy_row(mesh.times[L], 0, L + 1)
            self._imp_rows = rows
        return self._imp_rows

    @property
    def lam(self) -> np.ndarray:
        if self._lam is None:
            mesh, n = self.mesh, self.n
            N = self.schedule.n_impulses
            out = np.zeros((mesh.n_grid, N, n, n))
            if self.problem.g_y is not None:
                left = self.traj.left_limits
                for c in range(1, mesh.n_intervals):
                    sl = mesh.segment_slice(c)
                    t_arr = mesh.times[sl]
                    args = (self.schedule.times[:c], left[:c], self.levels[:c + 1])
                    for i in range(1, c + 1):
                        vals = np.asarray(self.problem.g_y(t_arr, *args, i))
                        out[sl, i - 1] = vals.reshape(len(t_arr), n, n)
            self._lam = out
        return self._lam


class ArrayKernel(LinearKernel):
    """Kernel given as dense grids; used for synthetic tests and lifts."""

    def __init__(self, K: np.ndarray, lam: np.ndarray, mesh: Mesh):
        P = mesh.n_grid
        K = np.asarray(K, dtype=float)
        if K.ndim == 2:
            K = K[:, :, None, None]
        self.K = K
        self._lam = np.asarray(lam, dtype=float) if lam is not None else \
            np.zeros((P, 0, K.shape[2], K.shape[3]))
        if self._lam.ndim == 2:
            self._lam = self._lam[:, :, None, None]
        self.mesh = mesh

    def row(self, p: int) -> np.ndarray:
        return self.K[p, :p + 1]

    def col(self, p: int) -> np.ndarray:
        return self.K[p:, p]

    def diag(self) -> np.ndarray:
        return np.einsum("ppab->pab", self.K)

    def impulse_rows(self) -> np.ndarray:
        N1 = self.mesh.n_impulses + 1
        return np.stack([self.K[self.mesh.left_index(j)] for j in range(1, N1 + 1)])

    @property
    def lam(self) -> np.ndarray:
        return self._lam


class LiftedKernel(LinearKernel):
    """Jump-free kernel of the lifted equation, evaluated row/column-wise.

    Avoids materializing the dense lifted grid, so fine meshes stay cheap;
    the coupling weights against the base kernel's impulse rows are
    precomputed once.
    """

    def __init__(self, base: LinearKernel, gam: GammaArray, mesh: Mesh):
        self.base = base
        self.mesh = mesh
        lam_grid = base.lam
        self.N = lam_grid.shape[1]
        self.n = lam_grid.shape[2]
        self._rows = base.impulse_rows()
        self._C = _coupling_weights(lam_grid, gam) if self.N else None
        self._lamz = np.zeros((mesh.n_grid, 0, self.n, self.n))
        self._diag = None

    def row(self, p: int) -> np.ndarray:
        out = np.array(self.base.row(p))
        if self.N:
            out += np.einsum("jab,jqbc->qac", self._C[p], self._rows[:self.N, :p + 1])
        return out

    def col(self, p: int) -> np.ndarray:
        out = np.array(self.base.col(p))
        if self.N:
            out += np.einsum("kjab,jbc->kac", self._C[p:, :self.N],
                             self._rows[:self.N, p])
        return out

    def diag(self) -> np.ndarray:
        if self._diag is None:
            out = np.array(self.base.diag())
            if self.N:
                out += np.einsum("pjab,jpbc->pac", self._C[:, :self.N],
                                 self._rows[:self.N])
            self._diag = out
        return self._diag

    def impulse_rows(self) -> np.ndarray:
        N1 = self.mesh.n_impulses + 1
        return np.stack([np.concatenate(
            [self.row(self.mesh.left_index(j)),
             np.zeros((self.mesh.n_grid - self.mesh.left_index(j) - 1,
                       self.n, self.n))])
            for j in range(1, N1 + 1)])

    @property
    def lam(self) -> np.ndarray:
        return self._lamz


# ---------------------------------------------------------------------------
# lifted kernel and resolvent


def _coupling_weights(lam_grid: np.ndarray, gam: GammaArray) -> np.ndarray:
    """C[p, j-1] = sum_{i >= j} lambda_i(t_p) GammaHat[i, j], the coefficient
    multiplying the row K(tau_j^-, .) in the lifted kernel."""
    P, N = lam_grid.shape[0], lam_grid.shape[1]
    n = gam.state_dim
    ghat = gamma_hat(gam)[1:N + 1 + 1, 1:N + 1]  # i=1..N+1 x j=1..N
    # lambda_i only exists for real impulses i <= N
    return np.einsum("piab,ijbc->pjac", lam_grid, ghat[:N])


def lift_kernel(kernel: LinearKernel, gam: GammaArray, schedule: ImpulseSchedule,
                mesh: Mesh):
    """Jump-free kernel of the lifted equation plus the forcing lift.

    Returns (Ktilde, lift) where Ktilde is a dense (P, P, n, n) grid and
    lift maps a forcing grid eta to the lifted forcing; the left limits that
    enter the lift are read off the doubled grid's left-copy entries.
    """
    P = mesh.n_grid
    lam_grid = kernel.lam
    N = lam_grid.shape[1]
    n = lam_grid.shape[2]
    rows = kernel.impulse_rows()  # (N+1, P, n, n)
    Kt = np.zeros((P, P, n, n))
    for p in range(P):
        Kt[p, :p + 1] = kernel.row(p)
    if N:
        C = _coupling_weights(lam_grid, gam)  # (P, N, n, n)
        Kt += np.einsum("pjab,jqbc->pqac", C, rows[:N])

        def lift(eta: np.ndarray) -> np.ndarray:
            eta = np.asarray(eta, dtype=float)
            eta_left = np.stack([eta[mesh.left_index(j)] for j in range(1, N + 1)])
            return eta + np.einsum("pjab,jb->pa", C, eta_left)
    else:
        def lift(eta: np.ndarray) -> np.ndarray:
            return np.asarray(eta, dtype=float).copy()

    return Kt, lift


@dataclass(frozen=True)
class DiscreteResolvent:
    """Resolvent kernel of the lifted equation on the quadrature grid.

    Satisfies R(t,s) = Ktilde(t,s) + int_s^t Ktilde(t,sig) R(sig,s) dsig under
    the trapezoid composition, exactly up to the triangular-solve roundoff.
    """

    mesh: Mesh
    state_dim: int
    big: np.ndarray  # (P*n, P*n) block lower triangular incl. diagonal

    def block(self, k: int, l: int) -> np.ndarray:
        n = self.state_dim
        return self.big[k * n:(k + 1) * n, l * n:(l + 1) * n]

    def as_blocks(self) -> np.ndarray:
        P, n = self.mesh.n_grid, self.state_dim
        return self.big.reshape(P, n, P, n).transpose(0, 2, 1, 3)

    def apply_forward(self, eta: np.ndarray) -> np.ndarray:
        """eta(t) + int_0^t R(t,s) eta(s) ds on every grid node."""
        mesh, n = self.mesh, self.state_dim
        eta = np.asarray(eta, dtype=float)
        out = eta.copy()
        blocks = self.as_blocks()
        for k in range(mesh.n_grid):
            w = mesh.range_weights(0, k)
            out[k] += np.einsum("l,lab,lb->a", w, blocks[k, :k + 1], eta[:k + 1])
        return out

    def row_at(self, k: int) -> np.ndarray:
        """(P, n, n) row R(t_k, .), zero beyond the triangle."""
        P, n = self.mesh.n_grid, self.state_dim
        out = np.zeros((P, n, n))
        out[:k + 1] = self.as_blocks()[k, :k + 1]
        return out

    def rows_at_impulses(self, schedule: ImpulseSchedule) -> dict:
        """Rows extracted at the impulse left-copy nodes, keyed by index."""
        return {j: self.row_at(self.mesh.left_index(j))
                for j in range(1, schedule.n_impulses + 2)}


def _half_gaps(mesh: Mesh):
    t = mesh.times
    a = np.zeros(len(t))
    b = np.zeros(len(t))
    a[:-1] = 0.5 * np.diff(t)
    b[1:] = 0.5 * np.diff(t)
    return a, b


def discrete_resolvent(Ktilde: np.ndarray, mesh: Mesh) -> DiscreteResolvent:
    """Solve the trapezoid resolvent identity by forward substitution in t.

    For each source column the recursion is lower triangular in the target
    time; the march runs target-major so each step is a dense block row
    update. Equivalent to summing the iterated-kernel series to convergence,
    with exact finite termination.
    """
    Kt = np.asarray(Ktilde, dtype=float)
    if Kt.ndim == 2:
        Kt = Kt[:, :, None, None]
    P, n = Kt.shape[0], Kt.shape[2]
    Kb = Kt.transpose(0, 2, 1, 3).reshape(P * n, P * n)
    a, b = _half_gaps(mesh)
    R = np.zeros((P * n, P * n))
    Rstrict = np.zeros((P * n, P * n))
    eye = np.eye(n)
    for k in range(P):
        rows = slice(k * n, (k + 1) * n)
        Kkk = Kb[rows, rows]
        hi = (k + 1) * n
        rhs = Kb[rows, :hi].copy()
        if k:
            below = slice(0, k * n)
            wa = np.repeat(a[:k], n)
            wb = np.repeat(b[:k], n)
            Krow = Kb[rows, below]
            rhs += (Krow * wa) @ R[below, :hi]
            rhs += (Krow * wb) @ Rstrict[below, :hi]
        sol = np.linalg.solve(eye - b[k] * Kkk, rhs[:, :k * n]) if k else \
            np.zeros((n, 0))
        R[rows, :k * n] = sol
        Rstrict[rows, :k * n] = sol
        R[rows, k * n:hi] = Kkk  # zero-length integration range on the diagonal
    return DiscreteResolvent(mesh=mesh, state_dim=n, big=R)


def resolvent_identity_residual(res: DiscreteResolvent, Ktilde: np.ndarray,
                                mesh: Mesh) -> float:
    """Max block norm of R - Ktilde - Ktilde o R (trapezoid composition)."""
    Kt = np.asarray(Ktilde, dtype=float)
    if Kt.ndim == 2:
        Kt = Kt[:, :, None, None]
    P, n = Kt.shape[0], Kt.shape[2]
    Kb = Kt.transpose(0, 2, 1, 3).reshape(P * n, P * n)
    a, b = _half_gaps(mesh)
    worst = 0.0
    Rb = res.big
    Rstrict = Rb.copy()
    for k in range(P):
        Rstrict[k * n:(k + 1) * n, k * n:(k + 1) * n] = 0.0
    for k in range(P):
        rows = slice(k * n, (k + 1) * n)
        hi = (k + 1) * n
        comp = np.zeros((n, hi))
        if k:
            below = slice(0, k * n)
            wa = np.repeat(a[:k], n)
            wb = np.repeat(b[:k], n)
            Krow = Kb[rows, below]
            comp[:, :] += (Krow * wa) @ Rb[below, :hi]
            comp[:, :] += (Krow * wb) @ Rstrict[below, :hi]
        comp[:, :k * n] += b[k] * Kb[rows, rows] @ Rb[rows, :k * n]
        diff = Rb[rows, :hi] - Kb[rows, :hi] - comp
        worst = max(worst, np.max(np.abs(diff)) if diff.size else 0.0)
    return worst


# ---------------------------------------------------------------------------
# direct marches


def solve_linear_forward(eta: np.ndarray, kernel: LinearKernel,
                         schedule: ImpulseSchedule, mesh: Mesh) -> np.ndarray:
    """March the forward linear impulsive equation node by node.

    y(t) = eta(t) + int_0^t K(t,s) y(s) ds + sum_{tau_i < t} lambda_i(t) y(tau_i^-);
    the implicit diagonal block is resolved by a direct linear solve, so the
    discrete residual of the marched solution is at roundoff.
    """
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 1:
        eta = eta[:, None]
    P, n = eta.shape
    times = mesh.times
    w = mesh.weights
    lam_grid = kernel.lam
    N = lam_grid.shape[1]
    left_idx = [mesh.left_index(i) for i in range(1, N + 1)]
    y = np.zeros((P, n))
    eye = np.eye(n)
    for p in range(P):
        rhs = eta[p].copy()
        if p:
            row = kernel.row(p)  # (p+1, n, n)
            rhs += np.einsum("q,qab,qb->a", w[:p], row[:p], y[:p])
        c = min(int(mesh.seg[p]), N)
        for i in range(1, c + 1):
            rhs += lam_grid[p, i - 1] @ y[left_idx[i - 1]]
        b_p = 0.0 if p == 0 else 0.5 * (times[p] - times[p - 1])
        if b_p == 0.0:
            y[p] = rhs
        else:
            Kpp = kernel.diag()[p]
            y[p] = np.linalg.solve(eye - b_p * Kpp, rhs)
    return y


def forward_residual(y: np.ndarray, eta: np.ndarray, kernel: LinearKernel,
                     schedule: ImpulseSchedule, mesh: Mesh) -> float:
    """Max-norm residual of the forward linear impulsive equation."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if eta.ndim == 1:
        eta = eta[:, None]
    P = mesh.n_grid
    lam_grid = kernel.lam
    N = lam_grid.shape[1]
    left_idx = [mesh.left_index(i) for i in range(1, N + 1)]
    worst = 0.0
    for p in range(P):
        acc = eta[p].copy()
        if p:
            c_w = mesh.range_weights(0, p)
            row = kernel.row(p)
            acc += np.einsum("q,qab,qb->a", c_w, row, y[:p + 1])
        for i in range(1, min(int(mesh.seg[p]), N) + 1):
            acc += lam_grid[p, i - 1] @ y[left_idx[i - 1]]
        worst = max(worst, float(np.max(np.abs(y[p] - acc))))
    return worst


def solve_adjoint(eta: np.ndarray, kernel: LinearKernel, gam: GammaArray,
                  schedule: ImpulseSchedule, mesh: Mesh,
                  p_end: Optional[int] = None):
    """Backward march of the adjoint linear impulsive equation.

    Solves, for row-vector-valued z (shape (P, n) or (P, r, n)),

        z(t) = eta(t) + int_t^H z(s) K(s,t) ds
             + sum_{j: t < tau_j < H} M_j K(tau_j^-, t)

    where H = t_{p_end} (default T), and the point coefficients follow the
    chain recursion M_j = kappa_j + sum_{l > j} M_l Lambda_{l j} with
    kappa_j = int_{tau_j}^H z lambda_j. Returns (z, M) with M indexed 1-based
    over impulse slots 1..N+1 (terminal slot always zero here).
    """
    eta = np.asarray(eta, dtype=float)
    squeeze = eta.ndim == 2
    if squeeze:
        eta = eta[:, None, :]
    P, r, n = eta.shape
    times = mesh.times
    w = mesh.weights
    lam_grid = kernel.lam
    N = lam_grid.shape[1]
    if p_end is None:
        p_end = P - 1
    left_idx = {j: mesh.left_index(j) for j in range(1, N + 2)}
    z = np.zeros((P, r, n))
    M = np.zeros((N + 2, r, n))
    eye = np.eye(n)
    imp_rows = kernel.impulse_rows() if N else None
    inner = [j for j in range(1, N + 1) if left_idx[j] < p_end]
    for p in range(p_end, -1, -1):
        rhs = eta[p].copy()
        if p < p_end:
            col = kernel.col(p)  # K(t_k, t_p) for k >= p
            kk = p_end - p
            rhs += np.einsum("k,krn,knm->rm", w[p + 1:p_end + 1],
                             z[p + 1:p_end + 1], col[1:kk + 1])
        for j in inner:
            if left_idx[j] > p:
                rhs += M[j] @ imp_rows[j - 1][p]
        a_p = 0.0 if p == p_end else 0.5 * (times[p + 1] - times[p])
        if a_p == 0.0:
            z[p] = rhs
        else:
            Kpp = kernel.diag()[p]
            z[p] = np.linalg.solve((eye - a_p * Kpp).T, rhs.T).T
        # crossing below a left copy: freeze its chain coefficient
        for j in inner:
            if left_idx[j] == p:
                Rj = p + 1
                cw = mesh.range_weights(Rj, p_end)
                M[j] = np.einsum("k,krn,knm->rm", cw, z[Rj:p_end + 1],
                                 lam_grid[Rj:p_end + 1, j - 1])
                for l in range(j + 1, N + 2):
                    M[j] += M[l] @ lam_grid[left_idx[l], j - 1]
    if squeeze:
        return z[:, 0, :], M[:, 0, :]
    return z, M


def adjoint_residual(z: np.ndarray, eta: np.ndarray, kernel: LinearKernel,
                     gam: GammaArray, schedule: ImpulseSchedule, mesh: Mesh,
                     p_end: Optional[int] = None,
                     point_rows: Optional[np.ndarray] = None) -> float:
    """Residual of the adjoint equation with chain coefficients re-assembled
    from z through the explicit path sums (independent of the march's own
    recursion). point_rows, when given, are 1-based direct point forcings at
    the impulse left limits (terminal slot N+1 included); their chains enter
    both the impulse couplings and a direct kernel-row term.
    """
    z = np.asarray(z, dtype=float)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[:, None, :]
    eta = np.asarray(eta, dtype=float)
    if eta.ndim == 2:
        eta = eta[:, None, :]
    P, r, n = z.shape
    if p_end is None:
        p_end = P - 1
    lam_grid = kernel.lam
    N = lam_grid.shape[1]
    imp_rows = kernel.impulse_rows()
    ghat = gamma_hat(gam)
    G = np.zeros((N + 2, r, n))
    if point_rows is not None:
        pr = np.asarray(point_rows, dtype=float)
        if pr.ndim == 2:
            pr = pr[:, None, :]
        G = pr
    # kappa_i = int over (tau_i, H) of z lambda_i
    kappa = np.zeros((N + 2, r, n))
    for i in range(1, N + 1):
        Ri = mesh.left_index(i) + 1
        if Ri <= p_end:
            cw = mesh.range_weights(Ri, p_end)
            kappa[i] = np.einsum("k,krn,knm->rm", cw, z[Ri:p_end + 1],
                                 lam_grid[Ri:p_end + 1, i - 1])
    # chains act strictly before the impulse; direct point rows include the
    # left-copy node itself (the kernel rows are zero beyond their triangle)
    M_chain = np.zeros((N + 2, r, n))
    M_direct = np.zeros((N + 2, r, n))
    for j in range(1, N + 2):
        for i in range(j, N + 2):
            M_chain[j] += kappa[i] @ ghat[i, j]
            M_direct[j] += G[i] @ ghat[i, j]
    worst = 0.0
    for p in range(p_end + 1):
        acc = eta[p].copy()
        if p < p_end:
            col = kernel.col(p)
            cw = mesh.range_weights(p, p_end)
            acc += np.einsum("k,krn,knm->rm", cw, z[p:p_end + 1],
                             col[:p_end - p + 1])
        for j in range(1, N + 2):
            if np.any(M_direct[j]):
                acc += M_direct[j] @ imp_rows[j - 1][p]
            if mesh.left_index(j) > p and np.any(M_chain[j]):
                acc += M_chain[j] @ imp_rows[j - 1][p]
        worst = max(worst, float(np.max(np.abs(z[p] - acc))))
    return worst
