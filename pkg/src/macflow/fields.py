"""Discrete fields on a MAC mesh and the maps between them.

Three kinds of piecewise-constant fields appear: scalars on primal cells
(density, pressure, viscosity), one scalar per face and direction for the
velocity (with homogeneous Dirichlet values stored as exact zeros on exterior
faces), and scalars on the dual-dual cells of an ordered direction pair
(gradients, strain components, face viscosities).

Projections of continuous data use tensor-product Gauss-Legendre quadrature;
``order`` is the number of points per axis, so polynomials up to degree
``2*order - 1`` are averaged exactly.
"""

import numpy as np

from .mesh import MacMesh

__all__ = [
    "FieldError",
    "QuadratureError",
    "CellScalarField",
    "VelocityField",
    "DualGridField",
    "project_cell",
    "project_face",
    "reconstruct_cell_to_face",
    "reconstruct_face_to_cell",
    "reconstruct_face_to_pair",
    "norm_l2",
    "norm_h1",
    "cell_inner",
    "velocity_inner",
]

ZERO_MEAN_RTOL = 1e-12


class FieldError(ValueError):
    """Field data inconsistent with its mesh or declared invariants."""


class QuadratureError(RuntimeError):
    """Sampled data produced non-finite quadrature values."""


def _frozen(values, size, what):
    arr = np.ascontiguousarray(values, dtype=float).ravel()
    if arr.size != size:
        raise FieldError(f"{what}: expected {size} values, got {arr.size}")
    arr.flags.writeable = False
    return arr


class CellScalarField:
    """One real per primal cell, lexicographic order.

    With ``zero_mean=True`` the field asserts membership in the zero-mean
    subspace: sum_K |K| q_K = 0 within ``1e-12 * ||q||_L2``.
    """

    def __init__(self, mesh: MacMesh, values, zero_mean=False):
        self.mesh = mesh
        self.values = _frozen(values, mesh.n_cells, "cell field")
        self.zero_mean = bool(zero_mean)
        if self.zero_mean:
            total = float(np.dot(mesh.cell_volumes.ravel(), self.values))
            if abs(total) > ZERO_MEAN_RTOL * max(norm_l2(self), np.finfo(float).tiny):
                raise FieldError(f"field declared zero-mean but sum |K| q_K = {total:g}")

    @property
    def shaped(self):
        return self.values.reshape(self.mesh.cells_shape)

    @classmethod
    def constant(cls, mesh, value):
        return cls(mesh, np.full(mesh.n_cells, float(value)))

    def __repr__(self):
        return f"CellScalarField(n={self.values.size})"


class VelocityField:
    """One real per face of each directional face set, exterior entries
    exactly zero (homogeneous Dirichlet space)."""

    def __init__(self, mesh: MacMesh, components):
        self.mesh = mesh
        comps = []
        if len(components) != mesh.dim:
            raise FieldError(f"need {mesh.dim} components, got {len(components)}")
        for i, comp in enumerate(components):
            arr = _frozen(comp, mesh.n_faces(i), f"velocity component {i}")
            ext = ~mesh.interior_mask(i).ravel()
            if np.any(arr[ext] != 0.0):
                raise FieldError(f"component {i} has nonzero exterior-face entries")
            comps.append(arr)
        self.components = tuple(comps)

    def shaped(self, i):
        return self.components[i].reshape(self.mesh.faces_shape(i))

    @classmethod
    def zero(cls, mesh):
        return cls(mesh, [np.zeros(mesh.n_faces(i)) for i in range(mesh.dim)])

    @classmethod
    def from_interior(cls, mesh, components):
        """Build from arbitrary per-face arrays, zeroing exterior entries."""
        comps = []
        for i, comp in enumerate(components):
            arr = np.array(comp, dtype=float).reshape(mesh.faces_shape(i))
            arr[~mesh.interior_mask(i)] = 0.0
            comps.append(arr.ravel())
        return cls(mesh, comps)

    def __repr__(self):
        sizes = "+".join(str(c.size) for c in self.components)
        return f"VelocityField(n={sizes})"


class DualGridField:
    """One real per dual-dual cell of the ordered pair (i, j)."""

    def __init__(self, mesh: MacMesh, i, j, values):
        self.mesh = mesh
        self.pair = (int(i), int(j))
        size = int(np.prod(mesh.pair_shape(i, j)))
        self.values = _frozen(values, size, f"dual grid field ({i},{j})")

    @property
    def shaped(self):
        return self.values.reshape(self.mesh.pair_shape(*self.pair))

    def __repr__(self):
        return f"DualGridField(pair={self.pair}, n={self.values.size})"


# -- quadrature -----------------------------------------------------------------

def _gauss01(order):
    """Gauss-Legendre nodes/weights on [0, 1]; weights sum to one."""
    x, w = np.polynomial.legendre.leggauss(int(order))
    return 0.5 * (x + 1.0), 0.5 * w


def _axis_points(breaks, nodes):
    lo = breaks[:-1]
    width = np.diff(breaks)
    return (lo[:, None] + width[:, None] * nodes[None, :]).ravel()


def _sample(fn, grids):
    samples = np.asarray(fn(*grids), dtype=float)
    if samples.shape != grids[0].shape:
        samples = np.broadcast_to(samples, grids[0].shape)
    if not np.all(np.isfinite(samples)):
        raise QuadratureError("non-finite samples in quadrature")
    return samples


def _contract(samples, shape, qpos, weights):
    """Reshape to ``shape`` and contract the quadrature axes listed in
    ``qpos`` (descending order keeps the positions valid)."""
    samples = samples.reshape(shape)
    for pos in sorted(qpos, reverse=True):
        samples = np.tensordot(samples, weights, axes=([pos], [0]))
    return samples


def _box_average(axis_breaks, fn, order):
    """Average of ``fn`` over every box of the axis-product partition given by
    ``axis_breaks`` (one breakpoint array per axis). Returns the array of box
    averages in C order."""
    nodes, weights = _gauss01(order)
    pts = [_axis_points(b, nodes) for b in axis_breaks]
    grids = np.meshgrid(*pts, indexing="ij")
    samples = _sample(fn, grids)
    shape, qpos = [], []
    for b in axis_breaks:
        qpos.append(len(shape) + 1)
        shape.extend([b.size - 1, nodes.size])
    return _contract(samples, shape, qpos, weights)


def project_cell(mesh: MacMesh, fn, order=5) -> CellScalarField:
    """Cell averages of an integrable scalar ``fn(x0, .., x_{d-1})`` (numpy
    broadcasting callable)."""
    avg = _box_average(mesh.breaks, fn, order)
    return CellScalarField(mesh, avg.ravel())


def project_face(mesh: MacMesh, fns, variant="dual", order=5) -> VelocityField:
    """Project a vector function onto the velocity space.

    ``variant="dual"`` averages component ``i`` over the velocity control
    volume around each face; ``variant="fortin"`` averages over the face
    itself, which commutes with the discrete divergence.  Exterior faces are
    forced to zero either way.
    """
    if len(fns) != mesh.dim:
        raise FieldError(f"need {mesh.dim} component callables")
    comps = []
    nodes, weights = _gauss01(order)
    for i, fn in enumerate(fns):
        if variant == "dual":
            axis_breaks = [
                mesh.dual_breaks[a] if a == i else mesh.breaks[a]
                for a in range(mesh.dim)
            ]
            vals = _box_average(axis_breaks, fn, order)
        elif variant == "fortin":
            pts = [
                mesh.breaks[a] if a == i else _axis_points(mesh.breaks[a], nodes)
                for a in range(mesh.dim)
            ]
            grids = np.meshgrid(*pts, indexing="ij")
            samples = _sample(fn, grids)
            shape, qpos = [], []
            for a in range(mesh.dim):
                if a == i:
                    shape.append(mesh.n[a] + 1)
                else:
                    qpos.append(len(shape) + 1)
                    shape.extend([mesh.n[a], nodes.size])
            vals = _contract(samples, shape, qpos, weights)
        else:
            raise ValueError(f"unknown projection variant {variant!r}")
        arr = vals.reshape(mesh.faces_shape(i)).copy()
        arr[~mesh.interior_mask(i)] = 0.0
        comps.append(arr.ravel())
    return VelocityField(mesh, comps)


# -- reconstructions --------------------------------------------------------------

def reconstruct_cell_to_face(q: CellScalarField, i) -> np.ndarray:
    """Convex interpolation of a cell field to direction-i faces,
    alpha_sigma = |D_{K,sigma}| / |D_sigma|; boundary faces copy the adjacent
    cell.  Returns the flat face array."""
    mesh = q.mesh
    qs = q.shaped
    out = np.empty(mesh.faces_shape(i))
    half_lo = 0.5 * mesh.widths[i]          # |D_{K,sigma}| per unit cross-section
    dw = mesh.dual_widths[i]
    alpha = half_lo[:-1] / dw[1:-1]          # weight of the cell behind each interior face
    sh = [1] * mesh.dim
    sh[i] = alpha.size
    alpha = alpha.reshape(sh)
    lo = [slice(None)] * mesh.dim
    hi = [slice(None)] * mesh.dim
    inner = [slice(None)] * mesh.dim
    lo[i] = slice(0, mesh.n[i] - 1)
    hi[i] = slice(1, mesh.n[i])
    inner[i] = slice(1, mesh.n[i])
    out[tuple(inner)] = alpha * qs[tuple(lo)] + (1.0 - alpha) * qs[tuple(hi)]
    first = [slice(None)] * mesh.dim
    last = [slice(None)] * mesh.dim
    first[i] = 0
    last[i] = mesh.n[i]
    cell_first = [slice(None)] * mesh.dim
    cell_last = [slice(None)] * mesh.dim
    cell_first[i] = 0
    cell_last[i] = mesh.n[i] - 1
    out[tuple(first)] = qs[tuple(cell_first)]
    out[tuple(last)] = qs[tuple(cell_last)]
    return out.ravel()


def reconstruct_face_to_cell(mesh: MacMesh, v, i) -> CellScalarField:
    """Arithmetic mean of the two direction-i faces of each cell."""
    vs = np.asarray(v, dtype=float).reshape(mesh.faces_shape(i))
    lo = [slice(None)] * mesh.dim
    hi = [slice(None)] * mesh.dim
    lo[i] = slice(0, mesh.n[i])
    hi[i] = slice(1, mesh.n[i] + 1)
    return CellScalarField(mesh, (0.5 * (vs[tuple(lo)] + vs[tuple(hi)])).ravel())


def reconstruct_face_to_pair(mesh: MacMesh, v, i, j, alpha=0.5) -> DualGridField:
    """Interpolate direction-i face scalars onto the (i, j) dual-dual grid
    with weight ``alpha`` on the face behind; exterior dual faces keep
    ``alpha * v`` of their single neighbour."""
    vs = np.asarray(v, dtype=float).reshape(mesh.faces_shape(i))
    if i == j:
        lo = [slice(None)] * mesh.dim
        hi = [slice(None)] * mesh.dim
        lo[i] = slice(0, mesh.n[i])
        hi[i] = slice(1, mesh.n[i] + 1)
        out = alpha * vs[tuple(lo)] + (1.0 - alpha) * vs[tuple(hi)]
        return DualGridField(mesh, i, j, out.ravel())
    padded = _pad_zero(vs, j)
    lo = [slice(None)] * mesh.dim
    hi = [slice(None)] * mesh.dim
    lo[j] = slice(0, mesh.n[j] + 1)
    hi[j] = slice(1, mesh.n[j] + 2)
    out = alpha * padded[tuple(lo)] + (1.0 - alpha) * padded[tuple(hi)]
    return DualGridField(mesh, i, j, out.ravel())


def _pad_zero(arr, axis):
    pad = [(0, 0)] * arr.ndim
    pad[axis] = (1, 1)
    return np.pad(arr, pad)


# -- norms -----------------------------------------------------------------------

def norm_l2(field) -> float:
    """L2 norm of the piecewise-constant representation of a field."""
    if isinstance(field, CellScalarField):
        return float(np.sqrt(np.dot(field.mesh.cell_volumes.ravel(), field.values ** 2)))
    if isinstance(field, VelocityField):
        total = 0.0
        for i, comp in enumerate(field.components):
            total += float(np.dot(field.mesh.dual_volumes(i).ravel(), comp ** 2))
        return float(np.sqrt(total))
    if isinstance(field, DualGridField):
        vols = field.mesh.pair_volumes(*field.pair).ravel()
        return float(np.sqrt(np.dot(vols, field.values ** 2)))
    raise TypeError(f"no L2 norm for {type(field).__name__}")


def norm_lp(field, p) -> float:
    """Lp norm (p >= 1 or inf) of a piecewise-constant field."""
    if isinstance(field, CellScalarField):
        vols, vals = field.mesh.cell_volumes.ravel(), field.values
    elif isinstance(field, DualGridField):
        vols, vals = field.mesh.pair_volumes(*field.pair).ravel(), field.values
    elif isinstance(field, VelocityField):
        vols = np.concatenate([field.mesh.dual_volumes(i).ravel()
                               for i in range(field.mesh.dim)])
        vals = np.concatenate(field.components)
    else:
        raise TypeError(f"no Lp norm for {type(field).__name__}")
    if np.isinf(p):
        return float(np.max(np.abs(vals))) if vals.size else 0.0
    return float(np.dot(vols, np.abs(vals) ** p) ** (1.0 / p))


def norm_h1(u: VelocityField) -> float:
    """Discrete H1_0 seminorm: face-pair differences weighted by
    |sigma~| / d_sigma~ plus the matching boundary terms."""
    mesh = u.mesh
    total = 0.0
    for i in range(mesh.dim):
        us = u.shaped(i)
        for j in range(mesh.dim):
            if j == i:
                # pairs inside each cell along axis i
                diff = np.diff(us, axis=i)
                w = mesh.widths[i]
                sh = [1] * mesh.dim
                sh[i] = w.size
                cross = mesh.cell_volumes / w.reshape(sh)   # |sigma~| per cell
                total += float(np.sum(cross / w.reshape(sh) * diff ** 2))
            else:
                padded = _pad_zero(us, j)                    # zero beyond the boundary
                diff = np.diff(padded, axis=j)
                dwj = mesh.dual_widths[j]
                shj = [1] * mesh.dim
                shj[j] = dwj.size
                measure = mesh.pair_volumes(i, j) / dwj.reshape(shj)
                total += float(np.sum(measure / dwj.reshape(shj) * diff ** 2))
    return float(np.sqrt(total))


def cell_inner(q: CellScalarField, r: CellScalarField) -> float:
    return float(np.dot(q.mesh.cell_volumes.ravel() * q.values, r.values))


def velocity_inner(u: VelocityField, v: VelocityField) -> float:
    total = 0.0
    for i in range(u.mesh.dim):
        total += float(np.dot(u.mesh.dual_volumes(i).ravel() * u.components[i],
                              v.components[i]))
    return total
