"""Command-line front end: solve, gradient, residual-check and optimize runs.

Configurations are JSON files validated strictly (unknown keys are rejected
with their full path, so a misspelled option can never silently fall back to
a default). Numeric results are written as comma-separated tables whose
floats use shortest round-trip formatting, making repeated runs byte
identical; wall-clock metadata is segregated into run_meta.json.

Exit codes: 0 success (and all requested checks passed), 1 validation
failure, 2 numerical failure, 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .gradients import (
    compute_gradient_report,
    costate_p,
    costate_p_residual,
    costate_phi,
    costate_phi_residual,
    resolvent_row_residual,
    resolvent_rows_at_impulses,
)
from .linear import (
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
from .ode import psi_costate, psi_residual, rho_matrix, rho_residual
from .optimize import OptimizeOptions, StallError, optimize
from .problem import ImpulseSchedule, build_mesh, validate_schedule
from .problems import PROBLEM_NAMES, get_problem
from .solver import SolveOptions, SolverError, evaluate_cost, jump_residual, \
    solve_state
from .variations import state_variation, variation_recursion_residual

__all__ = ["RunConfig", "load_config", "run", "main", "read_table"]

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_IO = 3


class ConfigError(ValueError):
    pass


_SCHEMA = {
    "command": str,
    "problem": {"name": str, "params": dict},
    "schedule": list,
    "controls": list,
    "min_gap": float,
    "mesh": {"points_per_interval": int},
    "solver": {"fp_tol": float, "fp_max_iter": int},
    "gradient": {"with_fd": bool, "h_tau": float, "h_a": float},
    "optimizer": {
        "max_iters": int, "step_init": float, "shrink": float,
        "sufficient_decrease": float, "tol_tau": float, "tol_a": float,
        "mesh_points": int, "mode": str, "max_shrinks": int,
    },
    "output_dir": str,
}

_COMMANDS = ("solve", "grad", "check", "optimize")


@dataclass
class RunConfig:
    command: str
    problem_name: str
    problem_params: dict = field(default_factory=dict)
    schedule: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    min_gap: Optional[float] = None
    mesh_points: int = 200
    solver: SolveOptions = field(default_factory=SolveOptions)
    with_fd: bool = False
    fd_h_tau: float = 1e-4
    fd_h_a: float = 1e-5
    optimizer: OptimizeOptions = field(default_factory=OptimizeOptions)
    output_dir: Path = Path(".")


def _check_keys(data: dict, schema: dict, path: str = "") -> None:
    for key, val in data.items():
        here = f"{path}.{key}" if path else key
        if key not in schema:
            raise ConfigError(f"unknown configuration key: {here}")
        expect = schema[key]
        if isinstance(expect, dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here} must be a mapping")
            if expect:
                _check_keys(val, expect, here)
        else:
            ok = isinstance(val, expect) or (
                expect is float and isinstance(val, int)
                and not isinstance(val, bool))
            if not ok:
                raise ConfigError(
                    f"{here} must be of type {expect.__name__}, got "
                    f"{type(val).__name__}")


def load_config(path) -> RunConfig:
    """Parse and strictly validate a JSON run configuration."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"config parse error at line {e.lineno}, column {e.colno}: {e.msg}")
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    _check_keys(data, _SCHEMA)

    command = data.get("command")
    if command not in _COMMANDS:
        raise ConfigError(
            f"command must be one of {', '.join(_COMMANDS)}, got {command!r}")
    prob = data.get("problem", {})
    name = prob.get("name")
    if name not in PROBLEM_NAMES:
        raise ConfigError(
            f"problem.name must be one of {', '.join(PROBLEM_NAMES)}, got {name!r}")

    cfg = RunConfig(command=command, problem_name=name,
                    problem_params=prob.get("params", {}))
    built = get_problem(name, **cfg.problem_params)
    horizon = built.problem.horizon
    min_gap = data.get("min_gap", built.schedule.min_gap)
    cfg.min_gap = float(min_gap)
    if "schedule" in data:
        times = np.asarray(data["schedule"], dtype=float)
        bad = validate_schedule(times, horizon, cfg.min_gap)
        if bad:
            raise ConfigError("invalid schedule: " + "; ".join(bad))
        cfg.schedule = times
    if "controls" in data:
        cfg.controls = np.atleast_2d(np.asarray(data["controls"], dtype=float))
        want = (len(cfg.schedule) if cfg.schedule is not None
                else built.schedule.n_impulses) + 1
        if cfg.controls.shape != (want, built.problem.control_dim):
            raise ConfigError(
                f"controls must have shape ({want}, {built.problem.control_dim})")
    mesh = data.get("mesh", {})
    cfg.mesh_points = int(mesh.get("points_per_interval", 200))
    if cfg.mesh_points < 2:
        raise ConfigError("mesh.points_per_interval must be >= 2")
    solver = data.get("solver", {})
    cfg.solver = SolveOptions(
        fp_tol=float(solver.get("fp_tol", 1e-12)),
        fp_max_iter=int(solver.get("fp_max_iter", 50)))
    grad = data.get("gradient", {})
    cfg.with_fd = bool(grad.get("with_fd", False))
    cfg.fd_h_tau = float(grad.get("h_tau", 1e-4))
    cfg.fd_h_a = float(grad.get("h_a", 1e-5))
    opt = data.get("optimizer", {})
    cfg.optimizer = OptimizeOptions(
        max_iters=int(opt.get("max_iters", 200)),
        step_init=float(opt.get("step_init", 1.0)),
        shrink=float(opt.get("shrink", 0.5)),
        sufficient_decrease=float(opt.get("sufficient_decrease", 1e-4)),
        tol_tau=float(opt.get("tol_tau", 1e-4)),
        tol_a=float(opt.get("tol_a", 1e-4)),
        mesh_points=int(opt.get("mesh_points", cfg.mesh_points)),
        mode=str(opt.get("mode", "joint")),
        max_shrinks=int(opt.get("max_shrinks", 60)),
    )
    cfg.output_dir = Path(data.get("output_dir", "."))
    return cfg


# ---------------------------------------------------------------------------
# table I/O


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_table(path: Path, header: list, rows: list) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


def read_table(path) -> dict:
    """Read a table written by write_table; columns come back as lists with
    numeric entries parsed to float where possible."""
    lines = Path(path).read_text().strip().split("\n")
    header = lines[0].split(",")
    cols = {h: [] for h in header}
    for line in lines[1:]:
        for h, cell in zip(header, line.split(",")):
            if cell in ("true", "false"):
                cols[h].append(cell == "true")
                continue
            try:
                cols[h].append(float(cell))
            except ValueError:
                cols[h].append(cell)
    return cols


# ---------------------------------------------------------------------------
# command implementations


def _trajectory_rows(mesh, traj):
    N = mesh.n_impulses
    left = {mesh.left_index(i) for i in range(1, N + 1)}
    right = {mesh.right_index(i) for i in range(1, N + 1)}
    rows = []
    for p in range(mesh.n_grid):
        side = "-" if p in left else "+" if p in right else "."
        rows.append([mesh.times[p], *traj.grid_values[p], side])
    return rows


def _write_gradient_tables(outdir: Path, report) -> None:
    n_tau = len(report.dJ_dtau)
    fd_tau = report.fd_dtau if report.fd_dtau is not None else \
        np.full(n_tau, np.nan)
    rows = []
    for j in range(n_tau):
        ae = abs(report.dJ_dtau[j] - fd_tau[j])
        re = ae / max(abs(fd_tau[j]), 1e-300)
        rows.append([j + 1, report.dJ_dtau[j], fd_tau[j], ae, re])
    write_table(outdir / "gradient_tau.csv",
                ["j", "dJ_dtau", "fd_dtau", "abs_err", "rel_err"], rows)
    da = report.dJ_da
    fd_a = report.fd_da if report.fd_da is not None else np.full_like(da, np.nan)
    rows = []
    for i in range(da.shape[0]):
        for k in range(da.shape[1]):
            ae = abs(da[i, k] - fd_a[i, k])
            re = ae / max(abs(fd_a[i, k]), 1e-300)
            rows.append([i, k, da[i, k], fd_a[i, k], ae, re])
    write_table(outdir / "gradient_a.csv",
                ["i", "k", "dJ_da", "fd_da", "abs_err", "rel_err"], rows)


def _residual_checks(built, cfg: RunConfig) -> list:
    """Full residual suite on the configured problem; returns result rows."""
    problem = built.problem
    schedule = ImpulseSchedule(
        cfg.schedule if cfg.schedule is not None else built.schedule.times,
        problem.horizon, cfg.min_gap)
    controls = cfg.controls if cfg.controls is not None else built.controls
    mesh = build_mesh(schedule, cfg.mesh_points)
    traj = solve_state(problem, schedule, controls, mesh, cfg.solver)
    kern = TrajectoryKernel(problem, schedule, controls, traj)
    lam = build_lambda(problem, schedule, controls, traj)
    gam = build_gamma(lam)

    checks = []

    def add(name, value, tol):
        checks.append([name, value, tol, "pass" if value < tol else "FAIL"])

    jr = jump_residual(problem, schedule, controls, traj)
    add("jump-identity", float(np.max(jr)) if len(jr) else 0.0, 1e-10)

    gp = gamma_by_paths(lam)
    add("path-sum-equivalence",
        float(np.max(np.abs(gam.blocks - gp.blocks))), 1e-12)

    eta = np.ones((mesh.n_grid, problem.state_dim))
    y_lin = solve_linear_forward(eta, kern, schedule, mesh)
    add("forward-linear-equation",
        forward_residual(y_lin, eta, kern, schedule, mesh), 1e-8)
    z, _ = solve_adjoint(eta, kern, gam, schedule, mesh)
    add("adjoint-equation",
        adjoint_residual(z, eta, kern, gam, schedule, mesh), 1e-8)

    p = costate_p(problem, schedule, controls, traj, mesh, kern, gam)
    add("costate-equation",
        costate_p_residual(p, problem, schedule, controls, traj, kern, gam),
        1e-8)
    rows = resolvent_rows_at_impulses(problem, schedule, controls, traj,
                                      mesh, kern, gam)
    add("costate-row-equations",
        resolvent_row_residual(rows, problem, schedule, controls, traj,
                               kern, gam), 1e-8)
    phi = costate_phi(problem, schedule, controls, traj, mesh, kern, gam,
                      p, rows)
    add("control-costate-equation",
        costate_phi_residual(phi, problem, schedule, controls, traj, kern,
                             gam), 1e-8)
    worst_rec = 0.0
    for j in range(1, schedule.n_impulses + 1):
        v = state_variation(problem, schedule, controls, traj, j, mesh, kern,
                            gam)
        res = variation_recursion_residual(v, kern, schedule)
        if len(res):
            worst_rec = max(worst_rec, float(np.max(res)))
    add("sensitivity-recursion", worst_rec, 1e-8)

    check_mesh = mesh if mesh.n_grid <= 500 else build_mesh(
        schedule, max(2, 480 // mesh.n_intervals - 1))
    check_traj = traj if check_mesh is mesh else solve_state(
        problem, schedule, controls, check_mesh, cfg.solver)
    check_kern = kern if check_mesh is mesh else TrajectoryKernel(
        problem, schedule, controls, check_traj)
    Kt, _ = lift_kernel(check_kern, gam, schedule, check_mesh)
    R = discrete_resolvent(Kt, check_mesh)
    add("resolvent-identity",
        resolvent_identity_residual(R, Kt, check_mesh), 1e-10)

    if built.ode is not None:
        psi = psi_costate(problem, schedule, controls, traj, mesh, kern, gam, p)
        add("cumulative-costate-equation",
            psi_residual(problem, schedule, controls, traj, psi, kern, gam),
            1e-6)
        rho = rho_matrix(problem, schedule, controls, traj, mesh, kern, gam,
                         rows)
        add("cumulative-row-equations",
            rho_residual(problem, schedule, controls, traj, rho, kern, gam),
            1e-6)
    return checks


def run(cfg: RunConfig) -> int:
    """Execute a validated configuration; returns the process exit status."""
    meta = {
        "package_version": __version__,
        "command": cfg.command,
        "problem": cfg.problem_name,
        "started_at": datetime.now(timezone.utc).isoformat(),
    }
    try:
        outdir = cfg.output_dir
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        print(f"cannot create output directory: {e}", file=sys.stderr)
        return EXIT_IO

    built = get_problem(cfg.problem_name, **cfg.problem_params)
    problem = built.problem
    schedule = ImpulseSchedule(
        cfg.schedule if cfg.schedule is not None else built.schedule.times,
        problem.horizon, cfg.min_gap)
    controls = cfg.controls if cfg.controls is not None else built.controls
    status = EXIT_OK
    try:
        if cfg.command == "solve":
            mesh = build_mesh(schedule, cfg.mesh_points)
            traj = solve_state(problem, schedule, controls, mesh, cfg.solver)
            write_table(outdir / "trajectory.csv",
                        ["t"] + [f"y_{k + 1}" for k in range(problem.state_dim)]
                        + ["side"],
                        _trajectory_rows(mesh, traj))
            J = evaluate_cost(problem, schedule, controls, traj, mesh)
            (outdir / "result.json").write_text(json.dumps(
                {"J": J, "y_left_limits": traj.left_limits.tolist()},
                indent=2) + "\n")
        elif cfg.command == "grad":
            mesh = build_mesh(schedule, cfg.mesh_points)
            traj = solve_state(problem, schedule, controls, mesh, cfg.solver)
            report = compute_gradient_report(
                problem, schedule, controls, traj, mesh, with_fd=cfg.with_fd,
                fd_h_tau=cfg.fd_h_tau, fd_h_a=cfg.fd_h_a)
            _write_gradient_tables(outdir, report)
            (outdir / "result.json").write_text(json.dumps(
                {"J": report.J,
                 "tau_stationarity": report.tau_stationarity,
                 "vi_residual": report.a_vi_residual}, indent=2) + "\n")
        elif cfg.command == "check":
            checks = _residual_checks(built, cfg)
            write_table(outdir / "check.csv",
                        ["name", "value", "tolerance", "status"], checks)
            for name, value, tol, verdict in checks:
                print(f"{verdict:4s}  {name:32s} {value:.3e} (tol {tol:.0e})")
            if any(c[3] != "pass" for c in checks):
                status = EXIT_NUMERICAL
        elif cfg.command == "optimize":
            trace = optimize(problem, schedule, controls, cfg.optimizer,
                             cfg.solver)
            n_tau = schedule.n_impulses
            a_shape = np.atleast_2d(np.asarray(controls)).shape
            header = (["iteration"]
                      + [f"tau_{j + 1}" for j in range(n_tau)]
                      + [f"a_{i}_{k}" for i in range(a_shape[0])
                         for k in range(a_shape[1])]
                      + ["J", "grad_tau_norm", "vi_residual", "step",
                         "mesh_points", "gap_active"])
            rows = []
            for rec in trace.records:
                rows.append([rec.iteration, *rec.tau, *rec.a.ravel(), rec.J,
                             rec.grad_tau_norm, rec.vi_residual, rec.step,
                             rec.mesh_points, rec.gap_active])
            write_table(outdir / "trace.csv", header, rows)
            _write_gradient_tables(outdir, trace.final_report)
            (outdir / "result.json").write_text(json.dumps(
                {"converged": trace.converged,
                 "final_tau": trace.final_schedule.times.tolist(),
                 "final_a": trace.final_controls.tolist(),
                 "final_J": trace.final_report.J}, indent=2) + "\n")
            if not trace.converged:
                status = EXIT_NUMERICAL
    except (SolverError, StallError) as e:
        record = {"error": type(e).__name__, "message": str(e)}
        (outdir / "error.json").write_text(json.dumps(record, indent=2) + "\n")
        print(f"numerical failure: {e}", file=sys.stderr)
        status = EXIT_NUMERICAL
    except OSError as e:
        print(f"I/O failure: {e}", file=sys.stderr)
        status = EXIT_IO
    meta["finished_at"] = datetime.now(timezone.utc).isoformat()
    meta["exit_status"] = status
    try:
        (cfg.output_dir / "run_meta.json").write_text(
            json.dumps(meta, indent=2) + "\n")
    except OSError:
        return EXIT_IO
    return status


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="impvolt",
        description="Impulsive Volterra control: solve, gradients, checks, "
                    "schedule optimization.")
    parser.add_argument("config", help="path to a JSON run configuration")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
        return EXIT_IO
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
