"""Built-in benchmark problems.

Problems are defined by callbacks (closures over formulas), so they ship in
code; configuration files select and parametrize them by name. Each entry
bundles the problem data with a default schedule and control levels.

All built-ins are scalar-state, scalar-control; tests construct ad-hoc
multi-dimensional problems where dimension coverage matters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .problem import ImpulseSchedule, ProblemSpec

__all__ = ["BuiltinProblem", "get_problem", "list_problems", "PROBLEM_NAMES"]


def _col(x) -> np.ndarray:
    """Column view (k, 1) of a scalar or 1-d time argument."""
    return np.atleast_1d(np.asarray(x, dtype=float))[:, None]


def _rows(y) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return y if y.ndim == 2 else y[None, :]


def _const(t, val: np.ndarray) -> np.ndarray:
    """Broadcast a constant block over scalar-or-array t."""
    t_arr = np.atleast_1d(np.asarray(t, dtype=float))
    out = np.broadcast_to(val, (len(t_arr),) + np.shape(val)).copy()
    return out if np.ndim(t) else out[0]


@dataclass(frozen=True)
class BuiltinProblem:
    name: str
    problem: ProblemSpec
    schedule: ImpulseSchedule
    controls: np.ndarray
    ode: object = None  # OdeProblemSpec when the entry has an ODE form


def _p_lin() -> BuiltinProblem:
    """Jump-free linear Volterra problem with a known exponential solution."""
    k = 0.5

    def f(t, s, y, a):
        return k * _rows(y) + 0.0 * _col(t) + 0.0 * _col(s)

    def f_y(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.full((sc, 1, 1), k)

    def f_a(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.zeros((sc, 1, 1))

    def f_t1(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.zeros((sc, 1))

    problem = ProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=lambda t: np.ones((len(np.atleast_1d(t)), 1)),
        y0_dot=lambda t: np.zeros((len(np.atleast_1d(t)), 1)),
        f=f, f_y=f_y, f_a=f_a, f_t1=f_t1,
        F=lambda t, y, a: _rows(y)[:, 0] ** 2,
        F_y=lambda t, y, a: 2.0 * _rows(y),
        F_a=lambda t, y, a: np.zeros((_rows(y).shape[0], 1)),
        control_boxes=np.array([[0.0, 1.0]]),
    )
    schedule = ImpulseSchedule(np.zeros(0), horizon=1.0)
    return BuiltinProblem("P-LIN", problem, schedule, np.array([[0.5]]))


def _p_jump(cost: str = "quadratic") -> BuiltinProblem:
    """Pure-jump problem: the state counts the impulses fired so far."""

    def f(t, s, y, a):
        return 0.0 * (_col(t) + _col(s)) + 0.0 * _rows(y)

    def f_zero_mat(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.zeros((sc, 1, 1))

    def g(t, taus, ys, a):
        return np.array([float(len(taus))])

    def g_zero_vec(t, taus, ys, a):
        return _const(t, np.zeros(1))

    def g_tau(t, taus, ys, a, j):
        return _const(t, np.zeros(1))

    def g_y(t, taus, ys, a, j):
        return _const(t, np.zeros((1, 1)))

    def g_a(t, taus, ys, a, i):
        return _const(t, np.zeros((1, 1)))

    if cost == "quadratic":
        F = lambda t, y, a: _rows(y)[:, 0] ** 2
        F_y = lambda t, y, a: 2.0 * _rows(y)
    elif cost == "none":
        F = lambda t, y, a: np.zeros(_rows(y).shape[0])
        F_y = lambda t, y, a: np.zeros((_rows(y).shape[0], 1))
    else:
        raise ValueError(f"unknown cost variant {cost!r}")

    problem = ProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=lambda t: np.zeros((len(np.atleast_1d(t)), 1)),
        y0_dot=lambda t: np.zeros((len(np.atleast_1d(t)), 1)),
        f=f, f_y=f_zero_mat, f_a=f_zero_mat,
        f_t1=lambda t, s, y, a: np.zeros((_rows(y).shape[0], 1)),
        g=g, g_t=g_zero_vec, g_tau=g_tau, g_y=g_y, g_a=g_a,
        F=F, F_y=F_y,
        F_a=lambda t, y, a: np.zeros((_rows(y).shape[0], 1)),
        control_boxes=np.array([[0.0, 1.0]]),
    )
    schedule = ImpulseSchedule(np.array([0.3, 0.7]), horizon=1.0)
    return BuiltinProblem("P-JUMP", problem, schedule, np.zeros((3, 1)))


def _p_coupled() -> BuiltinProblem:
    """Constant kernel with proportional jump coupling; exercises the
    impulse-chain machinery without control or cost coupling."""
    c = 0.5

    def f(t, s, y, a):
        return _rows(y) + 0.0 * (_col(t) + _col(s))

    def f_y(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.ones((sc, 1, 1))

    def f_a(t, s, y, a):
        sc = np.broadcast(_col(t), _col(s), _rows(y)[:, :1]).shape[0]
        return np.zeros((sc, 1, 1))

    def g(t, taus, ys, a):
        return np.array([c * float(np.sum(np.asarray(ys)[:, 0]))])

    def g_t(t, taus, ys, a):
        return _const(t, np.zeros(1))

    def g_tau(t, taus, ys, a, j):
        return _const(t, np.zeros(1))

    def g_y(t, taus, ys, a, j):
        return _const(t, np.full((1, 1), c))

    def g_a(t, taus, ys, a, i):
        return _const(t, np.zeros((1, 1)))

    problem = ProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=lambda t: np.ones((len(np.atleast_1d(t)), 1)),
        y0_dot=lambda t: np.zeros((len(np.atleast_1d(t)), 1)),
        f=f, f_y=f_y, f_a=f_a,
        f_t1=lambda t, s, y, a: np.zeros((_rows(y).shape[0], 1)),
        g=g, g_t=g_t, g_tau=g_tau, g_y=g_y, g_a=g_a,
        F=lambda t, y, a: _rows(y)[:, 0] ** 2,
        F_y=lambda t, y, a: 2.0 * _rows(y),
        F_a=lambda t, y, a: np.zeros((_rows(y).shape[0], 1)),
        control_boxes=np.array([[0.0, 1.0]]),
    )
    schedule = ImpulseSchedule(np.array([0.3, 0.7]), horizon=1.0)
    return BuiltinProblem("P-COUPLED", problem, schedule, np.zeros((3, 1)))


def _p_coupled_full() -> BuiltinProblem:
    """Two impulses with every coupling active: time-dependent kernel,
    state/control/time-dependent jumps, and a terminal cost touching every
    left limit. Scales kept moderate so backward chains stay well
    conditioned."""

    def f(t, s, y, a):
        tc, sc, yv = _col(t), _col(s), _rows(y)
        return 0.5 * np.cos(0.5 * (tc - sc)) * (0.6 * yv + 0.4 * a[0])

    def f_y(t, s, y, a):
        tc, sc = _col(t), _col(s)
        val = 0.3 * np.cos(0.5 * (tc - sc)) + 0.0 * _rows(y)[:, :1]
        return val[:, :, None]

    def f_a(t, s, y, a):
        tc, sc = _col(t), _col(s)
        val = 0.2 * np.cos(0.5 * (tc - sc)) + 0.0 * _rows(y)[:, :1]
        return val[:, :, None]

    def f_t1(t, s, y, a):
        tc, sc, yv = _col(t), _col(s), _rows(y)
        return -0.25 * np.sin(0.5 * (tc - sc)) * (0.6 * yv + 0.4 * a[0])

    def g(t, taus, ys, a):
        total = 0.0
        for q in range(len(taus)):
            total += (0.5 * ys[q][0] + 0.15 * a[q][0] - 0.1 * taus[q]
                      + 0.05 * np.sin(t - taus[q]))
        return np.array([total])

    def g_t(t, taus, ys, a):
        tc = _col(t)
        val = np.sum(0.05 * np.cos(tc - np.asarray(taus)[None, :]), axis=1)
        out = val[:, None]
        return out if np.ndim(t) else out[0]

    def g_tau(t, taus, ys, a, j):
        tc = _col(t)
        out = -0.1 - 0.05 * np.cos(tc - taus[j - 1])
        return out if np.ndim(t) else out[0]

    def g_y(t, taus, ys, a, j):
        return _const(t, np.full((1, 1), 0.5))

    def g_a(t, taus, ys, a, i):
        val = np.full((1, 1), 0.15) if i + 1 <= len(taus) else np.zeros((1, 1))
        return _const(t, val)

    def G(taus, ys, a):
        ys = np.asarray(ys)
        return (1.2 * (ys[-1, 0] - 1.0) ** 2
                + 0.08 * float(np.sum(ys[:-1, 0] ** 2))
                + 0.05 * float(np.sum((np.asarray(taus) - 0.5) ** 2))
                + 0.03 * float(np.sum(np.asarray(a) ** 2)))

    def G_tau(taus, ys, a, j):
        return 0.1 * (taus[j - 1] - 0.5)

    def G_y(taus, ys, a, l):
        ys = np.asarray(ys)
        if l == len(ys):
            return np.array([2.4 * (ys[-1, 0] - 1.0)])
        return np.array([0.16 * ys[l - 1, 0]])

    def G_a(taus, ys, a, i):
        return np.array([0.06 * np.asarray(a)[i, 0]])

    problem = ProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=lambda t: 0.8 + 0.2 * np.sin(_col(t)),
        y0_dot=lambda t: 0.2 * np.cos(_col(t)),
        f=f, f_y=f_y, f_a=f_a, f_t1=f_t1,
        g=g, g_t=g_t, g_tau=g_tau, g_y=g_y, g_a=g_a,
        F=lambda t, y, a: (_rows(y)[:, 0] - 0.3) ** 2 + 0.1 * a[0] ** 2,
        F_y=lambda t, y, a: 2.0 * (_rows(y) - 0.3),
        F_a=lambda t, y, a: np.full((_rows(y).shape[0], 1), 0.2 * a[0]),
        G=G, G_tau=G_tau, G_y=G_y, G_a=G_a,
        control_boxes=np.array([[0.0, 1.0]]),
    )
    schedule = ImpulseSchedule(np.array([0.35, 0.7]), horizon=1.0)
    controls = np.array([[0.4], [0.6], [0.5]])
    return BuiltinProblem("P-COUPLED-FULL", problem, schedule, controls)


def _p_full() -> BuiltinProblem:
    """Single-impulse optimization target with all partials active."""

    def f(t, s, y, a):
        tc, sc, yv = _col(t), _col(s), _rows(y)
        return (1.0 + 0.1 * np.cos(tc)) * (-0.7 * yv + 0.5 * a[0]) \
            + 0.2 * np.sin(2.0 * sc)

    def f_y(t, s, y, a):
        tc, sc = _col(t), _col(s)
        val = -0.7 * (1.0 + 0.1 * np.cos(tc)) + 0.0 * sc + 0.0 * _rows(y)[:, :1]
        return val[:, :, None]

    def f_a(t, s, y, a):
        tc, sc = _col(t), _col(s)
        val = 0.5 * (1.0 + 0.1 * np.cos(tc)) + 0.0 * sc + 0.0 * _rows(y)[:, :1]
        return val[:, :, None]

    def f_t1(t, s, y, a):
        tc, sc, yv = _col(t), _col(s), _rows(y)
        return -0.1 * np.sin(tc) * (-0.7 * yv + 0.5 * a[0]) + 0.0 * sc

    def g(t, taus, ys, a):
        total = 0.0
        for q in range(len(taus)):
            total += 0.4 * ys[q][0] + 0.25 * a[q][0] - 0.15 * taus[q]
        return np.array([total])

    def g_t(t, taus, ys, a):
        return _const(t, np.zeros(1))

    def g_tau(t, taus, ys, a, j):
        return _const(t, np.array([-0.15]))

    def g_y(t, taus, ys, a, j):
        return _const(t, np.full((1, 1), 0.4))

    def g_a(t, taus, ys, a, i):
        val = np.full((1, 1), 0.25) if i + 1 <= len(taus) else np.zeros((1, 1))
        return _const(t, val)

    def G(taus, ys, a):
        ys = np.asarray(ys)
        return (1.5 * (ys[-1, 0] - 0.5) ** 2 + 0.1 * ys[0, 0] ** 2
                + 0.1 * (taus[0] - 0.45) ** 2
                + 0.04 * float(np.sum(np.asarray(a) ** 2)))

    def G_tau(taus, ys, a, j):
        return 0.2 * (taus[0] - 0.45)

    def G_y(taus, ys, a, l):
        ys = np.asarray(ys)
        if l == len(ys):
            return np.array([3.0 * (ys[-1, 0] - 0.5)])
        return np.array([0.2 * ys[0, 0]])

    def G_a(taus, ys, a, i):
        return np.array([0.08 * np.asarray(a)[i, 0]])

    problem = ProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=lambda t: 0.6 + 0.1 * _col(t),
        y0_dot=lambda t: np.full((len(np.atleast_1d(t)), 1), 0.1),
        f=f, f_y=f_y, f_a=f_a, f_t1=f_t1,
        g=g, g_t=g_t, g_tau=g_tau, g_y=g_y, g_a=g_a,
        F=lambda t, y, a: (_rows(y)[:, 0] - 0.3) ** 2 + 0.08 * (a[0] - 0.2) ** 2,
        F_y=lambda t, y, a: 2.0 * (_rows(y) - 0.3),
        F_a=lambda t, y, a: np.full((_rows(y).shape[0], 1), 0.16 * (a[0] - 0.2)),
        G=G, G_tau=G_tau, G_y=G_y, G_a=G_a,
        control_boxes=np.array([[0.0, 1.0]]),
    )
    schedule = ImpulseSchedule(np.array([0.4]), horizon=1.0)
    controls = np.array([[0.5], [0.5]])
    return BuiltinProblem("P-FULL", problem, schedule, controls)


def _p_ode() -> BuiltinProblem:
    """Impulsive ODE entry; the general form is obtained by lifting."""
    from .ode import OdeProblemSpec, lift_ode_problem

    def f_ode(t, y, a):
        tc, yv = _col(t), _rows(y)
        return -0.6 * yv + 0.4 * a[0] + 0.3 * np.sin(3.0 * tc)

    def f_ode_y(t, y, a):
        sc = np.broadcast(_col(t), _rows(y)[:, :1]).shape[0]
        return np.full((sc, 1, 1), -0.6)

    def f_ode_a(t, y, a):
        sc = np.broadcast(_col(t), _rows(y)[:, :1]).shape[0]
        return np.full((sc, 1, 1), 0.4)

    def jump(tau, y, a):
        return np.array([0.3 * np.asarray(y)[0] + 0.2 * np.asarray(a)[0]
                         - 0.1 * tau + 0.05])

    def G(taus, ys, a):
        return (np.asarray(ys)[-1, 0] - 0.4) ** 2

    def G_tau(taus, ys, a, j):
        return 0.0

    def G_y(taus, ys, a, l):
        ys = np.asarray(ys)
        if l == len(ys):
            return np.array([2.0 * (ys[-1, 0] - 0.4)])
        return np.zeros(1)

    def G_a(taus, ys, a, i):
        return np.zeros(1)

    ode = OdeProblemSpec(
        state_dim=1, control_dim=1, horizon=1.0,
        y0=np.array([0.5]),
        f_ode=f_ode, f_ode_y=f_ode_y, f_ode_a=f_ode_a,
        jump=jump,
        jump_tau=lambda tau, y, a: np.array([-0.1]),
        jump_y=lambda tau, y, a: np.full((1, 1), 0.3),
        jump_a=lambda tau, y, a: np.full((1, 1), 0.2),
        jump_convention="increment",
        F=lambda t, y, a: _rows(y)[:, 0] ** 2 + 0.05 * a[0] ** 2,
        F_y=lambda t, y, a: 2.0 * _rows(y),
        F_a=lambda t, y, a: np.full((_rows(y).shape[0], 1), 0.1 * a[0]),
        G=G, G_tau=G_tau, G_y=G_y, G_a=G_a,
        control_boxes=np.array([[0.0, 1.0]]),
    )
    problem = lift_ode_problem(ode)
    schedule = ImpulseSchedule(np.array([0.3, 0.65]), horizon=1.0)
    controls = np.array([[0.3], [0.5], [0.4]])
    return BuiltinProblem("P-ODE", problem, schedule, controls, ode=ode)


_BUILDERS = {
    "P-LIN": _p_lin,
    "P-JUMP": _p_jump,
    "P-COUPLED": _p_coupled,
    "P-COUPLED-FULL": _p_coupled_full,
    "P-FULL": _p_full,
    "P-ODE": _p_ode,
}

PROBLEM_NAMES = tuple(_BUILDERS)


def get_problem(name: str, **params) -> BuiltinProblem:
    """Look up a built-in problem, optionally parametrizing it."""
    if name not in _BUILDERS:
        raise KeyError(f"unknown problem {name!r}; known: {', '.join(PROBLEM_NAMES)}")
    return _BUILDERS[name](**params)


def list_problems() -> tuple:
    return PROBLEM_NAMES
