"""JSON configuration parsing with key-path error reporting.

Schema (all sections except ``mesh``/``problem``/``solver`` optional):

- ``mesh.axes``: list of per-axis specs, either ``{"breakpoints": [...]}`` or
  ``{"n": int, "lo": float, "hi": float, "stretch": float}`` (geometric
  width growth, total last/first ratio).
- ``problem``: ``{"name": str, "params": {...}}``.
- ``solver``: ``dt``, ``t_end``, and optionally ``picard_tol``,
  ``picard_max``, ``linear_tol``, ``advection_scheme``, ``quadrature_order``,
  ``output_every``, ``linear_solver``, ``forcing_time``.
- ``output``: ``vtk``, ``staggered``, ``diagnostics``, ``snapshot_prefix``,
  ``dump_operators``.
- ``convergence``: ``levels``, ``dt_coarsest``, ``t_end``, ``reference_n``.
"""

import json

from .mesh import AxisPartition, MeshError, build_mesh
from .problems import PROBLEM_NAMES, make_problem
from .solver import SolverConfig

__all__ = ["ConfigError", "load_config", "RunSetup"]


class ConfigError(ValueError):
    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path


def _expect(mapping, key, path, types, default=None, required=False):
    if key not in mapping:
        if required:
            raise ConfigError(f"{path}.{key}", "missing required key")
        return default
    value = mapping[key]
    if types is not None and not isinstance(value, types):
        raise ConfigError(f"{path}.{key}",
                          f"expected {types}, got {type(value).__name__}")
    return value


def _parse_axis(spec, path):
    if not isinstance(spec, dict):
        raise ConfigError(path, "axis spec must be an object")
    if "breakpoints" in spec:
        bp = spec["breakpoints"]
        if not isinstance(bp, list) or len(bp) < 2:
            raise ConfigError(f"{path}.breakpoints", "need a list of at least 2 numbers")
        try:
            return AxisPartition(bp)
        except MeshError as exc:
            raise ConfigError(f"{path}.breakpoints", str(exc)) from None
    n = _expect(spec, "n", path, int, required=True)
    lo = float(_expect(spec, "lo", path, (int, float), default=0.0))
    hi = float(_expect(spec, "hi", path, (int, float), default=1.0))
    stretch = float(_expect(spec, "stretch", path, (int, float), default=1.0))
    try:
        return AxisPartition.geometric(lo, hi, n, stretch)
    except MeshError as exc:
        raise ConfigError(path, str(exc)) from None


def parse_mesh(cfg, path="mesh"):
    axes = _expect(cfg, "axes", path, list, required=True)
    if not 2 <= len(axes) <= 3:
        raise ConfigError(f"{path}.axes", "need 2 or 3 axes")
    partitions = [_parse_axis(spec, f"{path}.axes[{k}]")
                  for k, spec in enumerate(axes)]
    try:
        return build_mesh(partitions)
    except MeshError as exc:
        raise ConfigError(path, str(exc)) from None


def parse_solver(cfg, path="solver"):
    dt = _expect(cfg, "dt", path, (int, float), required=True)
    t_end = _expect(cfg, "t_end", path, (int, float), required=True)
    kwargs = {}
    for key, types in (("picard_tol", (int, float)), ("picard_max", int),
                       ("linear_tol", (int, float)),
                       ("advection_scheme", str), ("quadrature_order", int),
                       ("output_every", int), ("linear_solver", str)):
        if key in cfg:
            kwargs[key] = cfg[key]
    try:
        return SolverConfig(dt=float(dt), t_end=float(t_end), **kwargs)
    except ValueError as exc:
        raise ConfigError(path, str(exc)) from None


class RunSetup:
    def __init__(self, mesh, problem, solver, output, convergence, raw):
        self.mesh = mesh
        self.problem = problem
        self.solver = solver
        self.output = output
        self.convergence = convergence
        self.raw = raw


def load_config(path_or_dict):
    if isinstance(path_or_dict, dict):
        raw = path_or_dict
    else:
        try:
            with open(path_or_dict) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError("<file>", f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")

    mesh_cfg = _expect(raw, "mesh", "<root>", dict, required=True)
    mesh = parse_mesh(mesh_cfg)

    problem_cfg = _expect(raw, "problem", "<root>", dict, required=True)
    name = _expect(problem_cfg, "name", "problem", str, required=True)
    if name not in PROBLEM_NAMES:
        raise ConfigError("problem.name",
                          f"unknown problem {name!r}; available: "
                          f"{', '.join(PROBLEM_NAMES)}")
    params = _expect(problem_cfg, "params", "problem", dict, default={})

    solver_cfg = _expect(raw, "solver", "<root>", dict, required=True)
    solver = parse_solver(solver_cfg)
    forcing_time = _expect(solver_cfg, "forcing_time", "solver", str,
                           default="endpoint")
    if forcing_time not in ("endpoint", "slab_average"):
        raise ConfigError("solver.forcing_time",
                          "must be 'endpoint' or 'slab_average'")
    try:
        problem = make_problem(name, mesh, params, forcing_time)
    except ValueError as exc:
        raise ConfigError("problem", str(exc)) from None

    output_cfg = _expect(raw, "output", "<root>", dict, default={})
    output = {
        "vtk": bool(_expect(output_cfg, "vtk", "output", bool, default=True)),
        "staggered": bool(_expect(output_cfg, "staggered", "output", bool,
                                  default=True)),
        "diagnostics": _expect(output_cfg, "diagnostics", "output", str,
                               default="diagnostics.csv"),
        "snapshot_prefix": _expect(output_cfg, "snapshot_prefix", "output",
                                   str, default="snapshot"),
        "dump_operators": bool(_expect(output_cfg, "dump_operators", "output",
                                       bool, default=False)),
    }

    conv_cfg = _expect(raw, "convergence", "<root>", dict, default=None)
    convergence = None
    if conv_cfg is not None:
        levels = _expect(conv_cfg, "levels", "convergence", list, required=True)
        if len(levels) < 3:
            raise ConfigError("convergence.levels",
                              "a study needs at least 3 levels")
        convergence = {
            "levels": [int(n) for n in levels],
            "dt_coarsest": float(_expect(conv_cfg, "dt_coarsest", "convergence",
                                         (int, float), required=True)),
            "t_end": float(_expect(conv_cfg, "t_end", "convergence",
                                   (int, float), required=True)),
            "reference_n": conv_cfg.get("reference_n"),
        }
        if convergence["reference_n"] is not None:
            convergence["reference_n"] = int(convergence["reference_n"])
    return RunSetup(mesh, problem, solver, output, convergence, raw)
