"""Refinement harness: runs a problem family across mesh levels with the
time step scaled proportionally to the mesh size, measures L2 errors against
an analytic solution or a fine-grid reference, and fits observed orders.

Fields are piecewise constant on axis-aligned boxes, so the difference
between solutions on two different meshes is integrated exactly by
intersecting the two box partitions axis by axis.
"""

import math
from dataclasses import dataclass

import numpy as np

from .mesh import AxisPartition, build_mesh, mesh_metrics
from .problems import make_problem
from .solver import SolverConfig, run_simulation

__all__ = [
    "ConvergenceLevel",
    "ConvergenceTable",
    "cell_field_difference",
    "velocity_difference",
    "convergence_study",
    "fit_order",
    "ERROR_FLOOR",
]

ERROR_FLOOR = 1e-13


def _overlap_1d(breaks_a, breaks_b):
    """Common refinement of two 1d partitions of the same interval: interval
    lengths plus the source indices on either side."""
    if abs(breaks_a[0] - breaks_b[0]) > 1e-12 or abs(breaks_a[-1] - breaks_b[-1]) > 1e-12:
        raise ValueError("partitions cover different intervals")
    merged = np.union1d(breaks_a, breaks_b)
    lengths = np.diff(merged)
    mids = 0.5 * (merged[:-1] + merged[1:])
    ia = np.clip(np.searchsorted(breaks_a, mids) - 1, 0, breaks_a.size - 2)
    ib = np.clip(np.searchsorted(breaks_b, mids) - 1, 0, breaks_b.size - 2)
    return lengths, ia, ib


def _box_l2_difference(breaks_a, values_a, breaks_b, values_b):
    """Exact L2 distance between piecewise-constant fields on two box
    partitions (one breakpoint array per axis each)."""
    dim = len(breaks_a)
    lengths, idx_a, idx_b = [], [], []
    for a in range(dim):
        ln, ia, ib = _overlap_1d(breaks_a[a], breaks_b[a])
        lengths.append(ln)
        idx_a.append(ia)
        idx_b.append(ib)
    diff = values_a[np.ix_(*idx_a)] - values_b[np.ix_(*idx_b)]
    weight = lengths[0]
    for ln in lengths[1:]:
        weight = np.multiply.outer(weight, ln)
    return math.sqrt(float(np.sum(weight * diff ** 2)))


def cell_field_difference(mesh_a, values_a, mesh_b, values_b) -> float:
    """L2 norm of the difference of two cell fields on different meshes."""
    return _box_l2_difference(
        [mesh_a.breaks[a] for a in range(mesh_a.dim)],
        np.asarray(values_a).reshape(mesh_a.cells_shape),
        [mesh_b.breaks[a] for a in range(mesh_b.dim)],
        np.asarray(values_b).reshape(mesh_b.cells_shape))


def velocity_difference(mesh_a, u_a, mesh_b, u_b) -> float:
    """L2 norm of the difference of two velocity fields, component by
    component on the dual-cell partitions."""
    total = 0.0
    for i in range(mesh_a.dim):
        breaks_a = [mesh_a.dual_breaks[a] if a == i else mesh_a.breaks[a]
                    for a in range(mesh_a.dim)]
        breaks_b = [mesh_b.dual_breaks[a] if a == i else mesh_b.breaks[a]
                    for a in range(mesh_b.dim)]
        # dual breakpoints repeat the bound when n == 1; they are strictly
        # increasing for any mesh with at least one interior face
        diff = _box_l2_difference(
            breaks_a, u_a.shaped(i), breaks_b, u_b.shaped(i))
        total += diff ** 2
    return math.sqrt(total)


@dataclass
class ConvergenceLevel:
    n: int
    h: float
    dt: float
    errors: dict
    bv_sum: float
    h1_time_integral: float
    max_u_l2: float


@dataclass
class ConvergenceTable:
    problem: str
    levels: list
    orders: dict
    flags: list
    reference_n: int | None = None

    def format(self):
        lines = [f"convergence study: {self.problem}"
                 + (f" (reference {self.reference_n}^2)" if self.reference_n else "")]
        lines.append(f"{'n':>6} {'h':>12} {'dt':>12} {'err_u':>13} "
                     f"{'err_p':>13} {'err_rho':>13}")
        for lv in self.levels:
            lines.append(
                f"{lv.n:6d} {lv.h:12.5e} {lv.dt:12.5e} "
                f"{lv.errors['u']:13.5e} {lv.errors['p']:13.5e} "
                f"{lv.errors['rho']:13.5e}")
        for key, order in self.orders.items():
            shown = "undefined" if order is None or math.isnan(order) else f"{order:.3f}"
            lines.append(f"order[{key}] = {shown}")
        for flag in self.flags:
            lines.append(f"note: {flag}")
        return "\n".join(lines)


def fit_order(hs, errors):
    """Least-squares slope of log(error) against log(h); None when the data
    cannot support a fit (repeated h or errors at the roundoff floor)."""
    hs = np.asarray(hs, dtype=float)
    errors = np.asarray(errors, dtype=float)
    if np.unique(hs).size < hs.size or hs.size < 2:
        return None
    if np.any(errors <= ERROR_FLOOR):
        return None
    slope = np.polyfit(np.log(hs), np.log(errors), 1)[0]
    return float(slope)


def convergence_study(problem_name, levels, dt_coarsest, t_end,
                      problem_params=None, solver_kwargs=None,
                      reference_n=None, forcing_time="endpoint",
                      progress=None) -> ConvergenceTable:
    """Run ``levels`` (cells per axis, unit square) with dt proportional to
    h; errors against the analytic solution when the problem has one, else
    against the final state of a ``reference_n`` run."""
    if len(levels) < 3:
        raise ValueError("a convergence study needs at least 3 levels")
    levels = [int(n) for n in levels]
    solver_kwargs = dict(solver_kwargs or {})
    flags = []
    reference = None

    def run_one(n):
        mesh = build_mesh([AxisPartition.uniform(0.0, 1.0, n)] * 2)
        problem = make_problem(problem_name, mesh, problem_params, forcing_time)
        n_steps = max(1, round(t_end / (dt_coarsest * levels[0] / n)))
        cfg = SolverConfig(dt=t_end / n_steps, t_end=t_end, **solver_kwargs)
        if progress:
            progress(f"level {n}x{n}: dt={cfg.dt:g}, {n_steps} steps")
        result = run_simulation(problem, cfg)
        return mesh, problem, cfg, result

    if reference_n is not None:
        ref_mesh, _, _, ref_result = run_one(reference_n)
        reference = (ref_mesh, ref_result.final_state)

    rows = []
    for n in levels:
        mesh, problem, cfg, result = run_one(n)
        state = result.final_state
        if problem.exact is not None:
            errors = problem.errors_vs_exact(state)
        elif reference is not None:
            ref_mesh, ref_state = reference
            errors = {
                "u": velocity_difference(mesh, state.u, ref_mesh, ref_state.u),
                "p": cell_field_difference(mesh, state.p.values,
                                           ref_mesh, ref_state.p.values),
                "rho": cell_field_difference(mesh, state.rho.values,
                                             ref_mesh, ref_state.rho.values),
            }
        else:
            raise ValueError(
                f"problem {problem_name!r} has no analytic solution; "
                "a reference level is required")
        rows.append(ConvergenceLevel(
            n=n, h=mesh_metrics(mesh).h, dt=cfg.dt, errors=errors,
            bv_sum=result.bv_accumulated,
            h1_time_integral=result.h1_time_integral,
            max_u_l2=result.max_u_l2))

    hs = [row.h for row in rows]
    orders = {}
    for key in ("u", "p", "rho"):
        errs = [row.errors[key] for row in rows]
        order = fit_order(hs, errs)
        orders[key] = order
        if order is None:
            if np.unique(hs).size < len(hs):
                flags.append(f"order[{key}] undefined: repeated mesh size")
            else:
                flags.append(f"order[{key}] undefined: errors at roundoff floor")
    return ConvergenceTable(problem=problem_name, levels=rows, orders=orders,
                            flags=flags, reference_n=reference_n)
