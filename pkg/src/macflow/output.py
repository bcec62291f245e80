"""Writers: diagnostics CSV, legacy ASCII VTK rectilinear snapshots,
documented staggered-field CSV dumps, and verification reports.

Staggered CSV layout (one row per degree of freedom):
``field,id,x,y,z,value`` with ``field`` one of ``rho``, ``p``, ``u0``,
``u1`` (and ``u2`` in 3d); ids are the lexicographic entity ids.  VTK files
carry cell data only, with the face velocities interpolated to cell centers
for visualization.
"""

import csv
import io
from dataclasses import asdict, fields as dc_fields

import numpy as np

from .fields import reconstruct_face_to_cell
from .verification import DiagnosticsRecord

__all__ = [
    "diagnostics_header",
    "record_to_row",
    "DiagnosticsCsvWriter",
    "write_vtk_rectilinear",
    "write_staggered_csv",
    "write_report_csv",
    "report_summary",
]


def diagnostics_header():
    return [f.name for f in dc_fields(DiagnosticsRecord)]


def record_to_row(record: DiagnosticsRecord):
    row = asdict(record)
    row["violations"] = ";".join(record.violations)
    return row


class DiagnosticsCsvWriter:
    """Streaming CSV sink for per-step diagnostics records."""

    def __init__(self, path):
        self.path = path
        self._fh = open(path, "w", newline="")
        self._writer = csv.DictWriter(self._fh, fieldnames=diagnostics_header())
        self._writer.writeheader()

    def __call__(self, record: DiagnosticsRecord):
        self._writer.writerow(record_to_row(record))
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _cell_velocity(state):
    mesh = state.rho.mesh
    comps = []
    for i in range(mesh.dim):
        comps.append(reconstruct_face_to_cell(mesh, state.u.components[i], i)
                     .values)
    while len(comps) < 3:
        comps.append(np.zeros(mesh.n_cells))
    return comps


def write_vtk_rectilinear(state, path, title="macflow snapshot"):
    """Legacy ASCII VTK rectilinear grid with cell-centered density,
    pressure and interpolated velocity."""
    mesh = state.rho.mesh
    axes = [mesh.breaks[a] for a in range(mesh.dim)]
    while len(axes) < 3:
        axes.append(np.array([0.0]))
    dims = [a.size for a in axes]
    buf = io.StringIO()
    buf.write("# vtk DataFile Version 2.0\n")
    buf.write(f"{title} t={state.t:.12g}\n")
    buf.write("ASCII\nDATASET RECTILINEAR_GRID\n")
    buf.write(f"DIMENSIONS {dims[0]} {dims[1]} {dims[2]}\n")
    for name, arr in zip(("X", "Y", "Z"), axes):
        buf.write(f"{name}_COORDINATES {arr.size} double\n")
        buf.write(" ".join(f"{x:.12g}" for x in arr) + "\n")
    buf.write(f"CELL_DATA {mesh.n_cells}\n")
    for name, values in (("density", state.rho.values),
                         ("pressure", state.p.values)):
        buf.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        _write_block(buf, _vtk_order(mesh, values))
    comps = [_vtk_order(mesh, c) for c in _cell_velocity(state)]
    buf.write("VECTORS velocity double\n")
    for k in range(mesh.n_cells):
        buf.write(f"{comps[0][k]:.12g} {comps[1][k]:.12g} {comps[2][k]:.12g}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def _vtk_order(mesh, values):
    # VTK expects x fastest; our lexicographic ids have the last axis fastest
    return np.asarray(values).reshape(mesh.cells_shape).transpose().ravel()


def _write_block(buf, values, per_line=6):
    vals = np.asarray(values).ravel()
    for start in range(0, vals.size, per_line):
        buf.write(" ".join(f"{v:.12g}" for v in vals[start:start + per_line]))
        buf.write("\n")


def write_staggered_csv(state, path):
    """Raw staggered values: one row per entity with its id and coordinates."""
    mesh = state.rho.mesh
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "id", "x", "y", "z", "value"])
        centers = mesh.cell_centers()
        for name, values in (("rho", state.rho.values), ("p", state.p.values)):
            for k in range(mesh.n_cells):
                writer.writerow([name, k, *_xyz(centers[k]), f"{values[k]:.17g}"])
        for i in range(mesh.dim):
            fc = mesh.face_centers(i)
            comp = state.u.components[i]
            for k in range(comp.size):
                writer.writerow([f"u{i}", k, *_xyz(fc[k]), f"{comp[k]:.17g}"])


def _xyz(coords):
    vals = list(np.asarray(coords, dtype=float))
    while len(vals) < 3:
        vals.append(0.0)
    return [f"{v:.17g}" for v in vals]


def write_report_csv(report: dict, path):
    """Serialize a verification report as check,value rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["check", "value"])
        for key, value in report.items():
            writer.writerow([key, f"{value:.17g}"])


def report_summary(title, report, thresholds):
    """Human-readable pass/fail summary; thresholds maps check name to the
    maximum admissible value."""
    lines = [title]
    ok = True
    for key, value in report.items():
        if key in thresholds:
            passed = value <= thresholds[key]
            ok &= passed
            status = "pass" if passed else "FAIL"
            lines.append(f"  {status}  {key}: {value:.3e} (allowed {thresholds[key]:.3e})")
        else:
            lines.append(f"  info  {key}: {value:.3e}")
    lines.append(f"=> {'all checks passed' if ok else 'CHECKS FAILED'}")
    return "\n".join(lines), ok
