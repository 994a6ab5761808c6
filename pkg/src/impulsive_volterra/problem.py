"""Problem data model: dynamics callbacks, impulse schedules, meshes, trajectories.

Time grids double every impulse node: each interval [tau_i, tau_{i+1}] carries
its own closed uniform sub-grid, so functions with jump discontinuities keep
both one-sided values on the grid. Trapezoid weights over any contiguous grid
range handle the zero-length gap between the two copies of an impulse node
automatically, which makes composite quadrature across impulses exact for
piecewise-smooth integrands.

Callback conventions (all arrays are float64, shapes below; callbacks must
broadcast over the time arguments in the numpy sense):

  y0(t), y0_dot(t)          t: (k,) -> (k, n)
  f(t, s, y, a)             t scalar & s (k,) & y (k,n)  -> (k, n)
                            or t (k,) & s scalar & y (n,) -> (k, n)
  f_y -> (k, n, n), f_a -> (k, n, m), f_t1 -> (k, n)  (same call modes)
  F(t, y, a)                t (k,), y (k,n), a (m,) -> (k,)
  F_y -> (k, n), F_a -> (k, m)
  g(t, taus, ys, a)         t scalar, taus (q,), ys (q,n), a (q+1,m) -> (n,)
                            q >= 1 always: g is never called with an empty
                            impulse list (that case contributes zero).
  g_t, g_tau(.., j), g_y(.., j), g_a(.., i)
                            t scalar or (k,) -> (n,)/(k,n), (n,n)/(k,n,n), ...
                            j is the 1-based impulse index in the lists,
                            i the 0-based control index (a_0 ... a_q).
  G(taus, ys, a)            taus (N,), ys (N+1,n) of left limits, a (N+1,m)
  G_tau(.., j) -> float, G_y(.., l) -> (n,), G_a(.., i) -> (m,)

f_t1 is the partial of f with respect to its first (outer) time slot; it is
only needed for impulse-time gradients and defaults to zero. f_t2 (second
slot) is accepted for interface completeness but not consumed by any
operation in this package.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "ProblemSpec",
    "ImpulseSchedule",
    "ControlVector",
    "Mesh",
    "PiecewiseTrajectory",
    "validate_schedule",
    "build_mesh",
    "control_at",
    "control_at_left",
    "control_at_right",
    "control_index_at",
]


@dataclass(frozen=True)
class ProblemSpec:
    """User-supplied dynamics, jump aggregate, costs and their partials.

    All callbacks are treated as pure functions of their arguments and must be
    total on the stated domains. Instances are immutable and safe to share
    across threads.
    """

    state_dim: int
    control_dim: int
    horizon: float
    y0: Callable
    f: Callable
    f_y: Callable
    F: Callable
    F_y: Callable
    F_a: Callable
    f_a: Optional[Callable] = None
    y0_dot: Optional[Callable] = None
    f_t1: Optional[Callable] = None
    f_t2: Optional[Callable] = None  # reserved, not consumed
    g: Optional[Callable] = None
    g_t: Optional[Callable] = None
    g_tau: Optional[Callable] = None
    g_y: Optional[Callable] = None
    g_a: Optional[Callable] = None
    G: Optional[Callable] = None
    G_tau: Optional[Callable] = None
    G_y: Optional[Callable] = None
    G_a: Optional[Callable] = None
    control_boxes: Optional[np.ndarray] = None  # (m, 2) or (N+1, m, 2)

    def __post_init__(self):
        if self.state_dim < 1:
            raise ValueError("state_dim must be a positive integer")
        if self.control_dim < 1:
            raise ValueError("control_dim must be a positive integer")
        if not (self.horizon > 0):
            raise ValueError("horizon must be positive")

    @property
    def has_jumps(self) -> bool:
        return self.g is not None

    def boxes_for(self, n_controls: int) -> np.ndarray:
        """Control boxes as an (n_controls, m, 2) array.

        A single (m, 2) box is shared by every control level; if no boxes were
        given, an unbounded box is returned.
        """
        m = self.control_dim
        if self.control_boxes is None:
            box = np.array([[-np.inf, np.inf]] * m)
            return np.broadcast_to(box, (n_controls, m, 2)).copy()
        boxes = np.asarray(self.control_boxes, dtype=float)
        if boxes.shape == (m, 2):
            return np.broadcast_to(boxes, (n_controls, m, 2)).copy()
        if boxes.shape != (n_controls, m, 2):
            raise ValueError(
                f"control_boxes must have shape ({m},2) or ({n_controls},{m},2), "
                f"got {boxes.shape}"
            )
        return boxes


def validate_schedule(times, horizon: float, min_gap: float) -> list[str]:
    """Check impulse-time admissibility; return a list of violations (empty = ok).

    Valid schedules satisfy min_gap <= tau_1, tau_{i+1} - tau_i >= min_gap and
    tau_N <= horizon - min_gap, which keeps every impulse strictly interior
    with a uniform separation margin.
    """
    violations = []
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if not (horizon > 0):
        violations.append(f"horizon must be positive, got {horizon}")
        return violations
    if not (min_gap > 0):
        violations.append(f"min_gap must be positive, got {min_gap}")
        return violations
    for i, t in enumerate(times):
        if not np.isfinite(t):
            violations.append(f"tau_{i + 1} is not finite: {t}")
    if violations:
        return violations
    n = len(times)
    if n == 0:
        return violations
    if times[0] < min_gap:
        violations.append(f"tau_1 = {times[0]} < min_gap = {min_gap}")
    for i in range(n - 1):
        gap = times[i + 1] - times[i]
        if gap < min_gap:
            violations.append(
                f"tau_{i + 2} - tau_{i + 1} = {gap} < min_gap = {min_gap}"
            )
    if times[-1] > horizon - min_gap:
        violations.append(
            f"tau_{n} = {times[-1]} > horizon - min_gap = {horizon - min_gap}"
        )
    return violations


@dataclass(frozen=True)
class ImpulseSchedule:
    """Strictly ordered impulse instants inside (0, T).

    The sentinels tau_0 = 0 and tau_{N+1} = T are derived, never stored as
    free variables.
    """

    times: np.ndarray
    horizon: float
    min_gap: float = 0.0

    def __post_init__(self):
        times = np.atleast_1d(np.asarray(self.times, dtype=float)).copy()
        times.setflags(write=False)
        object.__setattr__(self, "times", times)
        gap = self.min_gap if self.min_gap > 0 else 1e-3 * self.horizon
        object.__setattr__(self, "min_gap", float(gap))
        bad = validate_schedule(times, self.horizon, self.min_gap)
        if bad:
            raise ValueError("invalid impulse schedule: " + "; ".join(bad))

    @property
    def n_impulses(self) -> int:
        return len(self.times)

    @property
    def padded(self) -> np.ndarray:
        """(N+2,) boundaries [0, tau_1, ..., tau_N, T]."""
        return np.concatenate(([0.0], self.times, [self.horizon]))

    def replace_times(self, times) -> "ImpulseSchedule":
        return ImpulseSchedule(np.asarray(times, dtype=float), self.horizon, self.min_gap)


@dataclass(frozen=True)
class ControlVector:
    """Piecewise-constant control levels a_0 ... a_N, one per interval."""

    levels: np.ndarray  # (N+1, m)

    def __post_init__(self):
        levels = np.atleast_2d(np.asarray(self.levels, dtype=float)).copy()
        levels.setflags(write=False)
        object.__setattr__(self, "levels", levels)

    @property
    def n_levels(self) -> int:
        return self.levels.shape[0]

    def check_admissible(self, boxes: np.ndarray) -> list[str]:
        violations = []
        for i, a in enumerate(self.levels):
            lo, hi = boxes[i, :, 0], boxes[i, :, 1]
            if np.any(a < lo) or np.any(a > hi):
                violations.append(f"a_{i} = {a} outside box [{lo}, {hi}]")
        return violations


def as_control_array(controls, m: int) -> np.ndarray:
    """Normalize controls to an (N+1, m) float array."""
    if isinstance(controls, ControlVector):
        levels = controls.levels
    else:
        levels = np.asarray(controls, dtype=float)
    if levels.ndim == 1:
        levels = levels.reshape(-1, m) if m == 1 else levels.reshape(1, -1)
    return levels


def control_index_at(schedule: ImpulseSchedule, t: float, side: str = "none") -> int:
    """Index i of the interval (tau_i, tau_{i+1}) containing t.

    At an impulse instant, side='left' yields the earlier interval and
    side='right' the later one; side='none' rejects exact impulse times.
    """
    if t < 0 or t > schedule.horizon:
        raise ValueError(f"t = {t} outside [0, {schedule.horizon}]")
    taus = schedule.times
    hits = np.nonzero(taus == t)[0]
    if hits.size:
        if side == "left":
            return int(hits[0])
        if side == "right":
            return int(hits[0]) + 1
        raise ValueError(
            f"t = {t} is an impulse instant; use the left/right variant"
        )
    return int(np.searchsorted(taus, t))


def control_at(schedule: ImpulseSchedule, controls, t: float) -> np.ndarray:
    """Control level in force strictly inside the interval containing t."""
    levels = np.atleast_2d(np.asarray(
        controls.levels if isinstance(controls, ControlVector) else controls, dtype=float))
    if t == 0.0:
        return levels[0]
    if t == schedule.horizon:
        return levels[-1]
    return levels[control_index_at(schedule, t, side="none")]


def control_at_left(schedule: ImpulseSchedule, controls, t: float) -> np.ndarray:
    """One-sided control value u(t^-); at t = tau_i this is a_{i-1}."""
    levels = np.atleast_2d(np.asarray(
        controls.levels if isinstance(controls, ControlVector) else controls, dtype=float))
    if t <= 0.0:
        raise ValueError("left limit undefined at t = 0")
    return levels[control_index_at(schedule, t, side="left")]


def control_at_right(schedule: ImpulseSchedule, controls, t: float) -> np.ndarray:
    """One-sided control value u(t^+); at t = tau_i this is a_i."""
    levels = np.atleast_2d(np.asarray(
        controls.levels if isinstance(controls, ControlVector) else controls, dtype=float))
    if t >= schedule.horizon:
        raise ValueError("right limit undefined at t = horizon")
    return levels[control_index_at(schedule, t, side="right")]


@dataclass(frozen=True)
class Mesh:
    """Per-interval uniform trapezoid grid with doubled impulse nodes.

    `nodes` is the distinct-time view with (N+1)*M + 1 entries; `times` is the
    quadrature grid of (N+1)*(M+1) entries where every interior impulse time
    appears twice (left copy then right copy). `seg[p]` is the interval index
    of grid point p, i.e. the control a_{seg[p]} is in force there.
    """

    boundaries: np.ndarray        # (N+2,)
    points_per_interval: int      # M
    times: np.ndarray             # (P,) quadrature grid, P = (N+1)(M+1)
    seg: np.ndarray               # (P,) interval index per grid point
    weights: np.ndarray           # (P,) global composite trapezoid weights
    nodes: np.ndarray             # ((N+1)M + 1,) distinct node times
    impulse_node_index: dict      # impulse i (1-based) -> index into nodes

    @property
    def n_grid(self) -> int:
        return len(self.times)

    @property
    def n_intervals(self) -> int:
        return len(self.boundaries) - 1

    @property
    def n_impulses(self) -> int:
        return len(self.boundaries) - 2

    def left_index(self, i: int) -> int:
        """Grid index of the left copy of tau_i, i = 1..N+1 (N+1 is T)."""
        M = self.points_per_interval
        if not 1 <= i <= self.n_impulses + 1:
            raise IndexError(f"impulse index {i} out of range")
        return i * (M + 1) - 1

    def right_index(self, i: int) -> int:
        """Grid index of the right copy of tau_i, i = 0..N (0 is t = 0)."""
        M = self.points_per_interval
        if not 0 <= i <= self.n_impulses:
            raise IndexError(f"impulse index {i} out of range")
        return i * (M + 1)

    def segment_slice(self, i: int) -> slice:
        M = self.points_per_interval
        return slice(i * (M + 1), (i + 1) * (M + 1))

    def range_weights(self, p: int, q: int) -> np.ndarray:
        """Trapezoid weights for the contiguous grid range [p..q]."""
        if q < p:
            raise ValueError("empty quadrature range")
        dt = np.diff(self.times[p:q + 1])
        c = np.zeros(q - p + 1)
        c[:-1] += 0.5 * dt
        c[1:] += 0.5 * dt
        return c

    def integrate(self, values: np.ndarray, p: int = 0, q: Optional[int] = None):
        """Trapezoid integral of grid values over [t_p, t_q] (default all)."""
        if q is None:
            q = self.n_grid - 1
        c = self.range_weights(p, q)
        vals = np.asarray(values)[p:q + 1]
        return np.tensordot(c, vals, axes=(0, 0))

    def cumtrapz_backward(self, values: np.ndarray) -> np.ndarray:
        """Psi with Psi[p] = integral of values over [t_p, T]; Psi[-1] = 0."""
        vals = np.asarray(values, dtype=float)
        dt = np.diff(self.times)
        shape = (-1,) + (1,) * (vals.ndim - 1)
        inc = 0.5 * dt.reshape(shape) * (vals[:-1] + vals[1:])
        out = np.zeros_like(vals)
        out[:-1] = inc[::-1].cumsum(axis=0)[::-1]
        return out

    def grid_index_of(self, t: float, side: str = "right") -> int:
        """Grid index whose time equals t exactly; side picks the copy."""
        hits = np.nonzero(self.times == t)[0]
        if hits.size == 0:
            raise ValueError(f"t = {t} is not a mesh time")
        return int(hits[0] if side == "left" else hits[-1])


def build_mesh(schedule: ImpulseSchedule, M: int) -> Mesh:
    """Build the per-interval uniform mesh with every impulse time a node."""
    if M < 2:
        raise ValueError(f"points_per_interval must be >= 2, got {M}")
    b = schedule.padded
    n_int = len(b) - 1
    segs = [np.linspace(b[i], b[i + 1], M + 1) for i in range(n_int)]
    times = np.concatenate(segs)
    seg = np.repeat(np.arange(n_int), M + 1)
    w = np.zeros(len(times))
    for i in range(n_int):
        h = (b[i + 1] - b[i]) / M
        sl = slice(i * (M + 1), (i + 1) * (M + 1))
        w[sl] = h
        w[sl.start] = 0.5 * h
        w[sl.stop - 1] = 0.5 * h
    nodes = np.concatenate([segs[0]] + [s[1:] for s in segs[1:]])
    impulse_node_index = {i: i * M for i in range(1, n_int)}
    for arr in (times, seg, w, nodes, b):
        arr.setflags(write=False)
    return Mesh(
        boundaries=b,
        points_per_interval=M,
        times=times,
        seg=seg,
        weights=w,
        nodes=nodes,
        impulse_node_index=impulse_node_index,
    )


@dataclass(frozen=True)
class PiecewiseTrajectory:
    """State values on the quadrature grid with one-sided limits at impulses."""

    mesh: Mesh
    grid_values: np.ndarray  # (P, n)

    def __post_init__(self):
        vals = np.asarray(self.grid_values, dtype=float)
        if vals.ndim == 1:
            vals = vals[:, None]
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "grid_values", vals)
        if vals.shape[0] != self.mesh.n_grid:
            raise ValueError("grid_values rows must match the quadrature grid")

    @property
    def state_dim(self) -> int:
        return self.grid_values.shape[1]

    @property
    def values(self) -> np.ndarray:
        """State at the distinct mesh nodes (right limits at impulse nodes)."""
        M = self.mesh.points_per_interval
        segs = [self.grid_values[self.mesh.segment_slice(i)]
                for i in range(self.mesh.n_intervals)]
        return np.concatenate([segs[0]] + [s[1:] for s in segs[1:]])

    @property
    def left_limits(self) -> np.ndarray:
        """(N+1, n): y(tau_1^-), ..., y(tau_N^-), y(T^-)."""
        idx = [self.mesh.left_index(i) for i in range(1, self.mesh.n_impulses + 2)]
        return self.grid_values[idx]

    @property
    def right_limits(self) -> np.ndarray:
        """(N, n): y(tau_1^+), ..., y(tau_N^+)."""
        idx = [self.mesh.right_index(i) for i in range(1, self.mesh.n_impulses + 1)]
        return self.grid_values[np.asarray(idx, dtype=int)] if idx else \
            np.zeros((0, self.state_dim))

    def value_at(self, t: float, side: str = "right") -> np.ndarray:
        return self.grid_values[self.mesh.grid_index_of(t, side=side)]


def jump_lists(schedule: ImpulseSchedule, left_limits: np.ndarray, controls,
               count: int):
    """Argument lists (taus, left limits, controls) for g with `count` impulses."""
    levels = np.atleast_2d(np.asarray(
        controls.levels if isinstance(controls, ControlVector) else controls, dtype=float))
    return schedule.times[:count], left_limits[:count], levels[:count + 1]
